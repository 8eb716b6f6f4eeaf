"""Gated temporal attention network.

Forward pass for one mini-batch::

    x_cat = sum over tables of MLP_table(sum of that table's column embeddings)
    x     = x_num W_num + b_num + x_cat + risk_row          (risk_row = 0 if unlabeled)
    H_0   = dropout(x)
    h     = Concat_heads(sum_t alpha_t * H[t, head slice]) W_o
    gate  = sigmoid([x_cat | x_num | h] beta)
    H_l   = gate * h + (1 - gate) * H_{l-1}
    p     = sigmoid(PReLU(H_L W_0 + b_0) W_1 + b_1)

Layer ``l`` of ``L`` is evaluated only on nodes within ``L - l`` hops of the
batch centers, which is all the next layer reads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import RISK_UNLABELED, TABLES, FeatureMatrix
from .graph import BatchSubgraph
from .tensor import Tensor


class Variant(str, Enum):
    FULL = "full"
    NO_ATTENTION = "no-attention"
    NO_RISK = "no-risk"

    @property
    def display(self) -> str:
        return {"full": "GTAN", "no-attention": "GTAN-A", "no-risk": "GTAN-R"}[self.value]


@dataclass
class GtanConfig:
    hidden_dim: int = 256
    heads: int = 4
    layers: int = 2
    max_edges: int = 6
    dropout: float = 0.2
    variant: Variant = Variant.FULL
    head_activation: str = "identity"
    dtype: str = "float64"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.heads < 1 or self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.head_activation not in ("identity", "sigmoid"):
            raise ValueError(f"unknown head activation {self.head_activation!r}")
        if self.max_edges < 1:
            raise ValueError("max_edges must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class FeatureLayout:
    """Shape information the parameters depend on."""

    columns: tuple[str, ...]
    tables: dict[str, list[int]]
    vocab_sizes: tuple[int, ...]
    num_width: int

    @classmethod
    def of(cls, features: FeatureMatrix) -> "FeatureLayout":
        return cls(tuple(features.columns), {t: list(v) for t, v in features.tables.items()},
                   tuple(features.vocab_sizes), features.num_width)

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "tables": self.tables, "vocab_sizes": list(self.vocab_sizes),
                "num_width": self.num_width}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(tuple(d["columns"]), {t: list(v) for t, v in d["tables"].items()}, tuple(d["vocab_sizes"]),
                   int(d["num_width"]))


def _glorot(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_parameters(config: GtanConfig, layout: FeatureLayout, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, h = config.hidden_dim, config.heads
    dt = np.dtype(config.dtype)
    p: dict[str, np.ndarray] = {}
    for col, m in zip(layout.columns, layout.vocab_sizes):
        emb = (rng.standard_normal((m, d)) / np.sqrt(d)).astype(dt)
        emb[0] = 0.0  # unseen tokens start neutral; the row only trains if OOV occurs in training
        p[f"emb.{col}"] = emb
    for t in TABLES:
        if not layout.tables.get(t):
            continue
        p[f"mlp.{t}.w1"] = _glorot(rng, d, d, dt)
        p[f"mlp.{t}.b1"] = np.zeros((1, d), dt)
        p[f"mlp.{t}.w2"] = _glorot(rng, d, d, dt)
        p[f"mlp.{t}.b2"] = np.zeros((1, d), dt)
    if layout.num_width:
        p["num.w"] = _glorot(rng, layout.num_width, d, dt)
        p["num.b"] = np.zeros((1, d), dt)
    risk = (rng.standard_normal((3, d)) / np.sqrt(d)).astype(dt)
    risk[RISK_UNLABELED] = 0.0
    p["risk.w"] = risk
    for layer in range(config.layers):
        p[f"layer{layer}.att_src"] = (rng.standard_normal((d, h)) * 0.1 / np.sqrt(d)).astype(dt)
        p[f"layer{layer}.att_dst"] = (rng.standard_normal((d, h)) * 0.1 / np.sqrt(d)).astype(dt)
        p[f"layer{layer}.w_o"] = _glorot(rng, d, d, dt)
        p[f"layer{layer}.gate"] = _glorot(rng, 3 * d, 1, dt)
    p["head.w0"] = _glorot(rng, d, d, dt)
    p["head.b0"] = np.zeros((1, d), dt)
    p["head.w1"] = _glorot(rng, d, 1, dt)
    p["head.b1"] = np.zeros((1, 1), dt)
    p["head.prelu"] = np.full((1,), 0.25, dt)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def parameter_group(name: str) -> str:
    """Coarse group of a parameter: emb, mlp, num, risk, att, w_o, gate, head or prelu."""
    if name == "head.prelu":
        return "prelu"
    prefix, rest = name.split(".", 1)
    if prefix.startswith("layer"):
        return "att" if rest.startswith("att") else rest
    return prefix


# ---------------------------------------------------------------- components


def _mlp(v: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = T.leaky_relu(v @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def attribute_embed(cat_index: np.ndarray, layout: FeatureLayout, params: dict[str, Tensor]) -> Tensor:
    """Categorical embedding ``x_cat`` for each row of ``cat_index``.

    Column embeddings are row lookups, summed per table, passed through that
    table's MLP, and the table outputs are add-pooled.
    """
    cat_index = np.asarray(cat_index, dtype=np.int64)
    for j, m in enumerate(layout.vocab_sizes):
        col = cat_index[:, j]
        if col.size and (col.min() < 0 or col.max() >= m):
            raise IndexError(f"category index out of range for column {layout.columns[j]!r}")
    out = None
    for t in TABLES:
        cols = layout.tables.get(t)
        if not cols:
            continue
        acc = None
        for j in cols:
            e = T.take_rows(params[f"emb.{layout.columns[j]}"], cat_index[:, j])
            acc = e if acc is None else acc + e
        y = _mlp(acc, params, f"mlp.{t}")
        out = y if out is None else out + y
    if out is None:
        d = params["risk.w"].shape[1]
        out = Tensor(np.zeros((len(cat_index), d), dtype=params["risk.w"].dtype))
    return out


def project_numeric(x_num: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    if "num.w" not in params:
        d = params["risk.w"].shape[1]
        return Tensor(np.zeros((len(x_num), d), dtype=params["risk.w"].dtype))
    return Tensor(np.asarray(x_num, dtype=params["num.w"].dtype)) @ params["num.w"] + params["num.b"]


def _risk_mask(params) -> np.ndarray:
    w = params["risk.w"]
    mask = np.ones((w.shape[0], 1), dtype=w.dtype)
    mask[RISK_UNLABELED] = 0.0
    return mask


def risk_embed(risk_idx: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Risk rows; the ``unlabeled`` row is multiplied by a constant zero."""
    table = T.mul(params["risk.w"], _risk_mask(params))
    return T.take_rows(table, np.asarray(risk_idx, dtype=np.int64))


def compose_input(x_num: Tensor, x_cat: Tensor, risk_idx: np.ndarray | None, params: dict[str, Tensor],
                  variant: Variant = Variant.FULL) -> Tensor:
    x = x_num + x_cat
    if Variant(variant) is Variant.NO_RISK or risk_idx is None:
        return x
    return x + risk_embed(risk_idx, params)


def tgat_layer(H: Tensor, src: np.ndarray, dst: np.ndarray, n_dst: int, params: dict[str, Tensor], layer: int,
               heads: int, variant: Variant = Variant.FULL, head_activation: str = "identity",
               slope: float = T.LEAKY_SLOPE) -> tuple[Tensor, Tensor | np.ndarray]:
    """One multi-head temporal attention layer.

    Returns ``(h, alpha)`` where ``h`` has one row per destination node and
    ``alpha`` holds the ``(E, heads)`` edge weights.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    starts = T.segment_starts(dst, n_dst)
    d = H.shape[1]
    dh = d // heads
    values = T.take_rows(H, src)
    if Variant(variant) is Variant.NO_ATTENTION:
        deg = np.diff(np.r_[starts, len(dst)])
        alpha = np.repeat(1.0 / deg, heads).reshape(n_dst, heads)[dst].astype(H.dtype)
        weighted = T.mul(values, (1.0 / deg[dst]).astype(H.dtype)[:, None])
        agg = T.segment_sum(weighted, dst, n_dst, starts)
    else:
        s_src = H @ params[f"layer{layer}.att_src"]
        s_dst = T.slice_rows(H, n_dst) @ params[f"layer{layer}.att_dst"]
        logits = T.leaky_relu(T.take_rows(s_src, src) + T.take_rows(s_dst, dst), slope)
        alpha = T.segment_softmax(logits, dst, n_dst, starts)
        weighted = T.reshape(values, (len(src), heads, dh)) * T.reshape(alpha, (len(src), heads, 1))
        agg = T.reshape(T.segment_sum(weighted, dst, n_dst, starts), (n_dst, d))
    if head_activation == "sigmoid":
        agg = T.sigmoid(agg)
    return agg @ params[f"layer{layer}.w_o"], alpha


def gated_residual(x_cat: Tensor, x_num: Tensor, h: Tensor, x: Tensor, beta: Tensor) -> tuple[Tensor, Tensor]:
    """``z = gate * h + (1 - gate) * x`` with a scalar gate per node."""
    gate = T.sigmoid(T.concat([x_cat, x_num, h], axis=1) @ beta)
    return gate * h + (1.0 - gate) * x, gate


def predict_head(H: Tensor, params: dict[str, Tensor]) -> Tensor:
    hidden = T.prelu(H @ params["head.w0"] + params["head.b0"], params["head.prelu"])
    return T.sigmoid(hidden @ params["head.w1"] + params["head.b1"])


# ---------------------------------------------------------------- model


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass, for inspection and tests."""

    x_cat: Tensor | None = None
    x_num: Tensor | None = None
    x: Tensor | None = None
    alphas: list = field(default_factory=list)
    gates: list = field(default_factory=list)


class GtanModel:
    def __init__(self, config: GtanConfig, layout: FeatureLayout, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.layout = layout
        self.params = params if params is not None else init_parameters(config, layout, seed)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype, copy=True)

    def forward(self, batch: BatchSubgraph, features: FeatureMatrix, risk_idx: np.ndarray | None,
                training: bool = False, rng: np.random.Generator | None = None,
                trace: ForwardTrace | None = None) -> Tensor:
        """Fraud probabilities, shape ``(n_centers, 1)``.

        ``risk_idx`` gives the risk-vocabulary index of every subgraph node
        (local order); center rows must already be masked by the caller.
        """
        cfg = self.config
        if batch.hops != cfg.layers:
            raise ValueError(f"batch has {batch.hops} hops, model has {cfg.layers} layers")
        nodes = batch.nodes
        p = self.params
        x_cat = attribute_embed(features.cat_index[nodes], self.layout, p)
        x_num = project_numeric(features.x_num[nodes], p)
        x = compose_input(x_num, x_cat, risk_idx, p, cfg.variant)
        H = T.dropout(x, cfg.dropout, training, rng)
        if trace is not None:
            trace.x_cat, trace.x_num, trace.x = x_cat, x_num, x
        for layer in range(cfg.layers):
            hop = cfg.layers - 1 - layer
            src, dst, n_dst = batch.block(hop)
            h, alpha = tgat_layer(H, src, dst, n_dst, p, layer, cfg.heads, cfg.variant, cfg.head_activation)
            H, gate = gated_residual(T.slice_rows(x_cat, n_dst), T.slice_rows(x_num, n_dst), h,
                                     T.slice_rows(H, n_dst), p[f"layer{layer}.gate"])
            if trace is not None:
                trace.alphas.append(alpha)
                trace.gates.append(gate)
        return predict_head(H, p)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GTANCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, model: GtanModel, extra: dict | None = None) -> None:
    """Write config (JSON text) and named float32 tensors, little-endian."""
    block = json.dumps({"config": model.config.to_dict(), "layout": model.layout.to_dict(),
                        "extra": extra or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(block)))
        fh.write(block)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path, dtype: str | None = None) -> tuple[GtanModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_block = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(n_block).decode("utf-8"))
        (n,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            params[name] = arr
    cfg = meta["config"]
    if dtype is not None:
        cfg["dtype"] = dtype
    config = GtanConfig(**cfg)
    tensors = {k: Tensor(v.astype(config.dtype), requires_grad=True, name=k) for k, v in params.items()}
    return GtanModel(config, FeatureLayout.from_dict(meta["layout"]), tensors), meta["extra"]
