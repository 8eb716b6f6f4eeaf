"""Experiment protocols: temporal split, labeled-ratio sweep, ablations, sensitivity.

Every run fits the vocabulary and numeric scaler on training rows only,
builds the temporal graph over all rows, trains on labeled training-period
centers with a temporal validation holdout, and scores the test rows with
all training labels visible through the risk channel.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import FeatureMatrix, Preprocessor, TransactionTable
from .graph import TemporalGraph, build_graph_from_table
from .metrics import MetricsReport, evaluate_scores
from .model import GtanConfig, GtanModel, FeatureLayout, Variant
from .train import TrainConfig, TrainResult, infer, temporal_validation_split, train

log = logging.getLogger(__name__)

DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(1, 9))
METRICS = ("auc", "f1_macro", "ap")


@dataclass
class Dataset:
    """A sorted transaction table plus optional full ground truth.

    ``table.label`` holds the observed (partial) labels. When ``truth`` is
    absent, evaluation falls back to the observed labels of test rows.
    """

    table: TransactionTable
    truth: np.ndarray | None = None

    def __post_init__(self):
        if not self.table.is_sorted():
            order = self.table.sort_order()
            self.table = self.table.take(order)
            if self.truth is not None:
                self.truth = np.asarray(self.truth)[order]
        self._graphs: dict[int, TemporalGraph] = {}

    @classmethod
    def from_synthetic(cls, ds) -> "Dataset":
        return cls(ds.table, ds.truth)

    @property
    def observed(self) -> np.ndarray:
        return self.table.label

    def graph(self, max_edges: int) -> TemporalGraph:
        if max_edges not in self._graphs:
            self._graphs[max_edges] = build_graph_from_table(self.table, max_edges)
        return self._graphs[max_edges]


@dataclass
class Split:
    """``train``: labeled training centers; ``test``: evaluated rows (with targets).

    ``context`` rows are labeled rows outside training whose labels stay
    visible through the risk channel when scoring ``test``.
    """

    train: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    fit_rows: np.ndarray
    train_labels: np.ndarray
    context: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    context_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def check_disjoint(self) -> None:
        if np.intersect1d(self.train, self.test).size:
            raise ValueError("train and test sets overlap")
        if np.intersect1d(self.context, self.test).size:
            raise ValueError("context and test sets overlap")

    def inference_labels(self, n: int) -> np.ndarray:
        """Label array visible while scoring: training plus context labels."""
        out = np.full(n, -1, dtype=np.int8)
        out[self.train] = self.train_labels
        out[self.context] = self.context_labels
        return out


def temporal_boundary(timestamps: np.ndarray, train_fraction: float) -> float:
    """Rows strictly before the returned time belong to the training period."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    if train_fraction == 1.0:
        return float("inf")
    return float(timestamps.min() + train_fraction * (timestamps.max() - timestamps.min()))


def temporal_split(dataset: Dataset, train_fraction: float = 0.7, label_context: bool | None = None) -> Split:
    """Rows before the time boundary train, rows after it test.

    Training centers are the observed-labeled rows before the boundary. With
    ``label_context`` (the default when ground truth is available) the test
    set is the later period's unlabeled rows, scored against ground truth,
    while the later period's observed labels remain visible as risk context.
    Without it, every later row with a known label is tested and all later
    labels are hidden.
    """
    ts = dataset.table.timestamp
    early = ts < temporal_boundary(ts, train_fraction)
    observed = dataset.observed
    train_ids = np.flatnonzero(early & (observed >= 0))
    if label_context is None:
        label_context = dataset.truth is not None
    if label_context:
        if dataset.truth is None:
            raise ValueError("label context needs ground truth for the unlabeled rows")
        test_ids = np.flatnonzero(~early & (observed < 0) & (dataset.truth >= 0))
        context = np.flatnonzero(~early & (observed >= 0))
        return Split(train_ids, test_ids, dataset.truth[test_ids].astype(np.int64), np.flatnonzero(early),
                     observed[train_ids].astype(np.int64), context, observed[context].astype(np.int64))
    truth = dataset.truth if dataset.truth is not None else observed
    test_ids = np.flatnonzero(~early & (truth >= 0))
    return Split(train_ids, test_ids, truth[test_ids].astype(np.int64), np.flatnonzero(early),
                 observed[train_ids].astype(np.int64))


def ratio_split(dataset: Dataset, ratio: float, seed: int = 0) -> Split:
    """A random ``ratio`` of the rows is labeled training data, the rest is test."""
    truth = dataset.truth if dataset.truth is not None else dataset.observed
    known = np.flatnonzero(truth >= 0)
    rng = np.random.default_rng(seed)
    n_train = int(round(ratio * len(known)))
    pick = np.sort(rng.choice(known, size=n_train, replace=False))
    test = np.setdiff1d(known, pick)
    return Split(pick, test, truth[test].astype(np.int64), pick, truth[pick].astype(np.int64))


@dataclass
class RunResult:
    variant: Variant
    seed: int
    report: MetricsReport
    scores: np.ndarray
    train: TrainResult | None = None


def prepare_features(dataset: Dataset, split: Split, dtype: str = "float64") -> tuple[Preprocessor, FeatureMatrix]:
    pre = Preprocessor.fit(dataset.table, split.fit_rows)
    return pre, pre.transform(dataset.table, dtype=np.dtype(dtype))


def run_gtan(dataset: Dataset, split: Split, model_config: GtanConfig, train_config: TrainConfig,
             seed: int | None = None, features: FeatureMatrix | None = None, progress=None) -> RunResult:
    seed = train_config.seed if seed is None else seed
    if features is None:
        _, features = prepare_features(dataset, split, model_config.dtype)
    graph = dataset.graph(model_config.max_edges)
    labels = np.full(len(dataset.table), -1, dtype=np.int8)
    labels[split.train] = split.train_labels
    fit_ids, val_ids = temporal_validation_split(dataset.table.timestamp, split.train, train_config.val_fraction)
    model = GtanModel(model_config, FeatureLayout.of(features), seed=seed)
    result = train(model, graph, features, labels, fit_ids, val_ids, replace(train_config, seed=seed),
                   progress=progress)
    visible = split.inference_labels(len(labels))
    scores = infer(model, graph, features, visible, split.test, train_config.eval_batch_size)
    return RunResult(model_config.variant, seed, evaluate_scores(scores, split.test_labels), scores, result)


def logistic_baseline(dataset: Dataset, split: Split, seed: int = 0) -> RunResult:
    """Per-transaction logistic regression on one-hot categories and scaled numerics."""
    from scipy import sparse
    from sklearn.linear_model import LogisticRegression

    _, feats = prepare_features(dataset, split)
    offsets = np.r_[0, np.cumsum(feats.vocab_sizes)[:-1]]
    cols = (feats.cat_index + offsets).ravel()
    rows = np.repeat(np.arange(feats.n), feats.cat_index.shape[1])
    onehot = sparse.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(feats.n, int(sum(feats.vocab_sizes))))
    X = sparse.hstack([onehot, sparse.csr_matrix(feats.x_num)]).tocsr()
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(X[split.train], split.train_labels)
    scores = clf.predict_proba(X[split.test])[:, 1]
    return RunResult(Variant.FULL, seed, evaluate_scores(scores, split.test_labels), scores)


# ---------------------------------------------------------------- plans and aggregation


@dataclass
class ExperimentPlan:
    split: str = "temporal"
    train_fraction: float = 0.7
    ratio: float = 0.8
    variants: tuple[Variant, ...] = (Variant.FULL,)
    seeds: Sequence[int] | None = None
    repetitions: int = 10

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.split not in ("temporal", "ratio"):
            raise ValueError(f"unknown split {self.split!r}")
        self.variants = tuple(Variant(v) for v in self.variants)

    def seed_list(self, base: int = 0) -> list[int]:
        return list(self.seeds) if self.seeds is not None else [base + r for r in range(self.repetitions)]

    def make_split(self, dataset: Dataset, seed: int) -> Split:
        if self.split == "temporal":
            return temporal_split(dataset, self.train_fraction)
        return ratio_split(dataset, self.ratio, seed)


@dataclass
class Aggregate:
    label: str
    runs: list[MetricsReport] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.runs]))

    def std(self, metric: str) -> float:
        return float(np.std([getattr(r, metric) for r in self.runs]))

    def row(self) -> dict:
        out = {"name": self.label, "runs": len(self.runs)}
        for m in METRICS:
            out[f"{m}_mean"] = self.mean(m)
            out[f"{m}_std"] = self.std(m)
        return out


def run_experiment(plan: ExperimentPlan, dataset: Dataset, model_config: GtanConfig,
                   train_config: TrainConfig, progress=None) -> list[Aggregate]:
    """Train and evaluate every (variant, seed) pair; one aggregate per variant."""
    rows = []
    for variant in plan.variants:
        agg = Aggregate(variant.display)
        cfg = replace(model_config, variant=variant)
        for seed in plan.seed_list(train_config.seed):
            split = plan.make_split(dataset, seed)
            split.check_disjoint()
            run = run_gtan(dataset, split, cfg, train_config, seed=seed)
            log.info("%s seed=%d auc=%.4f f1=%.4f ap=%.4f", agg.label, seed, run.report.auc,
                     run.report.f1_macro, run.report.ap)
            if progress is not None:
                progress(agg.label, seed, run.report)
            agg.runs.append(run.report)
        rows.append(agg)
    return rows


def ablate(dataset: Dataset, model_config: GtanConfig, train_config: TrainConfig, seeds: Sequence[int],
           plan: ExperimentPlan | None = None, progress=None) -> list[Aggregate]:
    """GTAN, GTAN-A and GTAN-R under one protocol."""
    plan = replace(plan or ExperimentPlan(), variants=(Variant.FULL, Variant.NO_ATTENTION, Variant.NO_RISK),
                   seeds=list(seeds))
    return run_experiment(plan, dataset, model_config, train_config, progress)


@dataclass
class SweepPoint:
    ratio: float
    report: MetricsReport
    n_train: int
    n_test: int


def sweep_ratio(dataset: Dataset, model_config: GtanConfig, train_config: TrainConfig,
                ratios: Sequence[float] = DEFAULT_RATIOS, seed: int | None = None, progress=None) -> list[SweepPoint]:
    """One run per labeled ratio; labels outside the training fraction stay hidden."""
    seed = train_config.seed if seed is None else seed
    out = []
    for r in ratios:
        split = ratio_split(dataset, r, seed)
        split.check_disjoint()
        run = run_gtan(dataset, split, model_config, train_config, seed=seed)
        point = SweepPoint(float(r), run.report, len(split.train), len(split.test))
        if progress is not None:
            progress(point)
        out.append(point)
    return out


def sensitivity(dataset: Dataset, model_config: GtanConfig, train_config: TrainConfig,
                layers: Sequence[int] = (1, 2, 4, 8), max_edges: Sequence[int] = (1, 2, 6, 10),
                plan: ExperimentPlan | None = None, seed: int | None = None, progress=None) -> list[dict]:
    """Vary depth and neighbour budget one at a time around ``model_config``."""
    plan = plan or ExperimentPlan()
    seed = train_config.seed if seed is None else seed
    split = plan.make_split(dataset, seed)
    grid = [("layers", v, replace(model_config, layers=v)) for v in layers]
    grid += [("max_edges", v, replace(model_config, max_edges=v)) for v in max_edges]
    rows = []
    for param, value, cfg in grid:
        run = run_gtan(dataset, split, cfg, train_config, seed=seed)
        row = {"parameter": param, "value": value, **{m: getattr(run.report, m) for m in METRICS}}
        if progress is not None:
            progress(row)
        rows.append(row)
    return rows


# ---------------------------------------------------------------- CSV output


def _csv(header: Sequence[str], rows: Sequence[Sequence], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def report_csv(report: MetricsReport, name: str = "GTAN", comments: Sequence[str] = ()) -> str:
    d = report.to_dict()
    header = ["name", *d]
    return _csv(header, [[name, *d.values()]], comments)


def aggregates_csv(rows: Sequence[Aggregate], comments: Sequence[str] = ()) -> str:
    dicts = [a.row() for a in rows]
    header = list(dicts[0]) if dicts else ["name"]
    return _csv(header, [list(d.values()) for d in dicts], comments)


def sweep_csv(points: Sequence[SweepPoint], comments: Sequence[str] = ()) -> str:
    header = ["ratio", "n_train", "n_test", *METRICS]
    return _csv(header, [[p.ratio, p.n_train, p.n_test, *(getattr(p.report, m) for m in METRICS)] for p in points],
                comments)


def sensitivity_csv(rows: Sequence[dict], comments: Sequence[str] = ()) -> str:
    header = ["parameter", "value", *METRICS]
    return _csv(header, [[r[h] for h in header] for r in rows], comments)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width text table."""
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
