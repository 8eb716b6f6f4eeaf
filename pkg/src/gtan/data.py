"""Transaction records, categorical vocabularies and numeric preprocessing.

Transactions are held column-wise in :class:`TransactionTable` so that a
million-row dataset stays a handful of numpy arrays; :class:`TransactionRecord`
is the row view used at API boundaries.

CSV layout (UTF-8, header required, optional leading ``#`` comment lines)::

    txn_id,cardholder_id,timestamp,card_*,txn_*,mcht_*,num_*,label

``label`` is ``1`` (fraud), ``0`` (legitimate) or ``-1`` (unlabeled).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

TABLES = ("card", "txn", "mcht")
TABLE_PREFIX = {"card": "card_", "txn": "txn_", "mcht": "mcht_"}
NUMERIC_PREFIX = "num_"
ID_COLUMNS = ("txn_id", "cardholder_id", "timestamp")
LABEL_COLUMN = "label"
OOV_TOKEN = "<oov>"


class SchemaError(ValueError):
    """CSV header does not satisfy the required layout."""


class Label(IntEnum):
    UNLABELED = -1
    LEGITIMATE = 0
    FRAUD = 1


# Risk vocabulary: fixed, three states.
RISK_LEGITIMATE = 0
RISK_FRAUD = 1
RISK_UNLABELED = 2
RISK_VOCAB = {"legitimate": RISK_LEGITIMATE, "fraud": RISK_FRAUD, "unlabeled": RISK_UNLABELED}


def risk_index(labels: np.ndarray) -> np.ndarray:
    """Map labels {-1, 0, 1} onto risk-vocabulary indices."""
    labels = np.asarray(labels)
    out = np.full(labels.shape, RISK_UNLABELED, dtype=np.int64)
    out[labels == Label.LEGITIMATE] = RISK_LEGITIMATE
    out[labels == Label.FRAUD] = RISK_FRAUD
    return out


@dataclass(frozen=True)
class TransactionRecord:
    txn_id: int
    cardholder_id: int
    timestamp: int
    card_attrs: tuple[str, ...]
    txn_attrs: tuple[str, ...]
    merchant_attrs: tuple[str, ...]
    numeric_attrs: tuple[float, ...]
    label: Label = Label.UNLABELED


@dataclass(frozen=True)
class Schema:
    """Column layout of a transaction table."""

    card: tuple[str, ...]
    txn: tuple[str, ...]
    mcht: tuple[str, ...]
    numeric: tuple[str, ...]

    @property
    def categorical(self) -> tuple[str, ...]:
        return self.card + self.txn + self.mcht

    def table_of(self, column: str) -> str:
        for t in TABLES:
            if column in getattr(self, t):
                return t
        raise KeyError(column)

    @property
    def header(self) -> list[str]:
        return [*ID_COLUMNS, *self.categorical, *self.numeric, LABEL_COLUMN]

    @classmethod
    def from_header(cls, header: Sequence[str]) -> "Schema":
        missing = [c for c in (*ID_COLUMNS, LABEL_COLUMN) if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        groups: dict[str, list[str]] = {t: [] for t in TABLES}
        numeric = []
        for col in header:
            if col in ID_COLUMNS or col == LABEL_COLUMN:
                continue
            if col.startswith(NUMERIC_PREFIX):
                numeric.append(col)
                continue
            for t in TABLES:
                if col.startswith(TABLE_PREFIX[t]):
                    groups[t].append(col)
                    break
            else:
                raise SchemaError(f"column {col!r} has no recognised prefix (card_/txn_/mcht_/num_)")
        return cls(tuple(groups["card"]), tuple(groups["txn"]), tuple(groups["mcht"]), tuple(numeric))


@dataclass
class TransactionTable:
    """Column-oriented set of transactions, row ``i`` is node ``i`` of the graph."""

    schema: Schema
    txn_id: np.ndarray
    cardholder_id: np.ndarray
    timestamp: np.ndarray
    categorical: dict[str, np.ndarray]
    numeric: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        n = len(self.txn_id)
        self.txn_id = np.asarray(self.txn_id, dtype=np.int64)
        self.cardholder_id = np.asarray(self.cardholder_id, dtype=np.int64)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int8)
        self.numeric = np.asarray(self.numeric, dtype=np.float64).reshape(n, len(self.schema.numeric))
        for col in self.schema.categorical:
            if len(self.categorical[col]) != n:
                raise ValueError(f"column {col!r} has {len(self.categorical[col])} rows, expected {n}")
        if np.any(self.timestamp < 0):
            raise ValueError("timestamps must be non-negative")
        if not np.all(np.isin(self.label, (-1, 0, 1))):
            raise ValueError("labels must be -1, 0 or 1")

    def __len__(self) -> int:
        return len(self.txn_id)

    def record(self, i: int) -> TransactionRecord:
        s = self.schema
        return TransactionRecord(
            txn_id=int(self.txn_id[i]),
            cardholder_id=int(self.cardholder_id[i]),
            timestamp=int(self.timestamp[i]),
            card_attrs=tuple(str(self.categorical[c][i]) for c in s.card),
            txn_attrs=tuple(str(self.categorical[c][i]) for c in s.txn),
            merchant_attrs=tuple(str(self.categorical[c][i]) for c in s.mcht),
            numeric_attrs=tuple(float(v) for v in self.numeric[i]),
            label=Label(int(self.label[i])),
        )

    def __iter__(self) -> Iterator[TransactionRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def records(self) -> list[TransactionRecord]:
        return list(self)

    def take(self, rows: np.ndarray) -> "TransactionTable":
        rows = np.asarray(rows)
        return TransactionTable(
            self.schema,
            self.txn_id[rows],
            self.cardholder_id[rows],
            self.timestamp[rows],
            {c: v[rows] for c, v in self.categorical.items()},
            self.numeric[rows],
            self.label[rows],
        )

    def with_labels(self, labels: np.ndarray) -> "TransactionTable":
        return TransactionTable(self.schema, self.txn_id, self.cardholder_id, self.timestamp,
                                self.categorical, self.numeric, np.asarray(labels, dtype=np.int8))

    def sort_order(self) -> np.ndarray:
        return np.lexsort((self.txn_id, self.timestamp, self.cardholder_id))

    def is_sorted(self) -> bool:
        order = self.sort_order()
        return bool(np.array_equal(order, np.arange(len(self))))

    def sorted(self) -> "TransactionTable":
        return self if self.is_sorted() else self.take(self.sort_order())

    @classmethod
    def from_records(cls, records: Iterable[TransactionRecord], schema: Schema) -> "TransactionTable":
        records = list(records)
        n = len(records)
        cat = {}
        for t in TABLES:
            cols = getattr(schema, t)
            attr = {"card": "card_attrs", "txn": "txn_attrs", "mcht": "merchant_attrs"}[t]
            for j, col in enumerate(cols):
                cat[col] = np.array([getattr(r, attr)[j] for r in records], dtype=object)
        return cls(
            schema,
            np.array([r.txn_id for r in records], dtype=np.int64),
            np.array([r.cardholder_id for r in records], dtype=np.int64),
            np.array([r.timestamp for r in records], dtype=np.int64),
            cat,
            np.array([r.numeric_attrs for r in records], dtype=np.float64).reshape(n, len(schema.numeric)),
            np.array([int(r.label) for r in records], dtype=np.int8),
        )


# ---------------------------------------------------------------- CSV


@dataclass
class RowError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


@dataclass
class IngestResult:
    table: TransactionTable
    errors: list[RowError] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)


class IngestError(ValueError):
    def __init__(self, errors: list[RowError]):
        self.errors = errors
        shown = "; ".join(str(e) for e in errors[:5])
        super().__init__(f"{len(errors)} malformed row(s): {shown}")


def _parse_int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise ValueError(f"unparsable {what} {text!r}") from None
        if not f.is_integer():
            raise ValueError(f"non-integer {what} {text!r}") from None
        return int(f)


def ingest_csv(path: str | Path, schema: Schema | None = None, max_errors: int = 100) -> IngestResult:
    """Read a transaction CSV, collecting malformed rows instead of failing.

    Rows come back sorted by ``(cardholder_id, timestamp, txn_id)``. More than
    ``max_errors`` malformed rows raise :class:`IngestError`.
    """
    comments: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        lineno = 0
        header_line = None
        for raw in fh:
            lineno += 1
            if raw.startswith("#"):
                comments.append(raw[1:].strip())
                continue
            header_line = raw
            break
        if header_line is None:
            raise SchemaError(f"{path}: no header row")
        header = next(csv.reader([header_line]))
        found = Schema.from_header(header)
        if schema is not None:
            missing = [c for c in schema.header if c not in header]
            if missing:
                raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        else:
            schema = found
        pos = {c: header.index(c) for c in schema.header}
        cat_pos = [pos[c] for c in schema.categorical]
        num_pos = [pos[c] for c in schema.numeric]

        ids, cards, stamps, labels, nums = [], [], [], [], []
        cats: list[list[str]] = [[] for _ in cat_pos]
        errors: list[RowError] = []
        for row in csv.reader(fh):
            lineno += 1
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                tid = _parse_int(row[pos["txn_id"]], "txn_id")
                cid = _parse_int(row[pos["cardholder_id"]], "cardholder_id")
                ts = _parse_int(row[pos["timestamp"]], "timestamp")
                if ts < 0:
                    raise ValueError(f"negative timestamp {ts}")
                lab = _parse_int(row[pos[LABEL_COLUMN]], "label")
                if lab not in (-1, 0, 1):
                    raise ValueError(f"label {lab} not in {{-1, 0, 1}}")
                num = [float(row[p]) for p in num_pos]
            except ValueError as exc:
                errors.append(RowError(lineno, str(exc)))
                if len(errors) > max_errors:
                    raise IngestError(errors) from None
                continue
            ids.append(tid)
            cards.append(cid)
            stamps.append(ts)
            labels.append(lab)
            nums.append(num)
            for j, p in enumerate(cat_pos):
                cats[j].append(row[p])
    for e in errors:
        log.warning("%s: %s", path, e)
    n = len(ids)
    table = TransactionTable(
        schema,
        np.array(ids, dtype=np.int64),
        np.array(cards, dtype=np.int64),
        np.array(stamps, dtype=np.int64),
        {c: np.array(v, dtype=object) for c, v in zip(schema.categorical, cats)},
        np.array(nums, dtype=np.float64).reshape(n, len(schema.numeric)),
        np.array(labels, dtype=np.int8),
    )
    if len(np.unique(table.txn_id)) != n:
        raise SchemaError("duplicate txn_id values")
    return IngestResult(table.sorted(), errors, comments)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(table: TransactionTable, path: str | Path, comments: Sequence[str] = ()) -> None:
    """Write ``table`` in the CSV layout above; output is byte-stable."""
    s = table.schema
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(s.header)
    cat_cols = [table.categorical[c] for c in s.categorical]
    for i in range(len(table)):
        w.writerow([
            int(table.txn_id[i]), int(table.cardholder_id[i]), int(table.timestamp[i]),
            *(str(col[i]) for col in cat_cols),
            *(_fmt(v) for v in table.numeric[i]),
            int(table.label[i]),
        ])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    """Per-column token maps; index 0 is the out-of-vocabulary slot."""

    tokens: dict[str, np.ndarray]

    @classmethod
    def build(cls, table: TransactionTable, rows: np.ndarray | None = None) -> "Vocabulary":
        if rows is not None and len(rows) == 0:
            raise ValueError("cannot build a vocabulary from an empty training split")
        tokens = {}
        for col in table.schema.categorical:
            values = table.categorical[col] if rows is None else table.categorical[col][rows]
            tokens[col] = np.array(sorted(set(map(str, values))), dtype=object)
        return cls(tokens)

    @property
    def columns(self) -> list[str]:
        return list(self.tokens)

    def size(self, column: str) -> int:
        return len(self.tokens[column]) + 1

    def mapping(self, column: str) -> dict[str, int]:
        m = {OOV_TOKEN: 0}
        m.update({t: i + 1 for i, t in enumerate(self.tokens[column])})
        return m

    @property
    def risk_size(self) -> int:
        return len(RISK_VOCAB)

    def encode_column(self, column: str, values: np.ndarray) -> np.ndarray:
        vocab = self.tokens[column].astype(str)
        vals = np.asarray(values).astype(str)
        if len(vocab) == 0:
            return np.zeros(len(vals), dtype=np.int64)
        pos = np.searchsorted(vocab, vals)
        pos_c = np.minimum(pos, len(vocab) - 1)
        hit = vocab[pos_c] == vals
        return np.where(hit, pos_c + 1, 0).astype(np.int64)

    def encode(self, table: TransactionTable) -> np.ndarray:
        cols = table.schema.categorical
        out = np.zeros((len(table), len(cols)), dtype=np.int64)
        for j, col in enumerate(cols):
            out[:, j] = self.encode_column(col, table.categorical[col])
        return out

    def decode_column(self, column: str, codes: np.ndarray) -> np.ndarray:
        lookup = np.concatenate([np.array([OOV_TOKEN], dtype=object), self.tokens[column]])
        return lookup[np.asarray(codes)]

    def to_dict(self) -> dict:
        return {c: [str(t) for t in v] for c, v in self.tokens.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls({c: np.array(v, dtype=object) for c, v in d.items()})


# ---------------------------------------------------------------- numeric scaling


@dataclass
class NumericScaler:
    """Z-score per column; columns named ``*amount*`` pass through log1p first."""

    columns: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def _log_mask(columns: Sequence[str]) -> np.ndarray:
        return np.array(["amount" in c for c in columns], dtype=bool)

    @classmethod
    def _pre(cls, columns, values: np.ndarray) -> np.ndarray:
        values = np.array(values, dtype=np.float64, copy=True)
        mask = cls._log_mask(columns)
        if mask.any():
            values[:, mask] = np.log1p(np.maximum(values[:, mask], 0.0))
        return values

    @classmethod
    def fit(cls, columns: Sequence[str], values: np.ndarray) -> "NumericScaler":
        pre = cls._pre(columns, values)
        if len(pre) == 0:
            raise ValueError("cannot fit a scaler on zero rows")
        return cls(tuple(columns), pre.mean(axis=0), pre.std(axis=0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        pre = self._pre(self.columns, values)
        safe = np.where(self.std > 0, self.std, 1.0)
        out = (pre - self.mean) / safe
        out[:, self.std == 0] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NumericScaler":
        return cls(tuple(d["columns"]), np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


@dataclass
class FeatureMatrix:
    """Model-ready features for every transaction (row = node)."""

    x_num: np.ndarray
    cat_index: np.ndarray
    columns: tuple[str, ...]
    tables: dict[str, list[int]]
    vocab_sizes: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.x_num.shape[0]

    @property
    def num_width(self) -> int:
        return self.x_num.shape[1]


@dataclass
class Preprocessor:
    """Vocabulary plus scaler, both fitted on training rows only."""

    schema: Schema
    vocab: Vocabulary
    scaler: NumericScaler

    @classmethod
    def fit(cls, table: TransactionTable, train_rows: np.ndarray) -> "Preprocessor":
        train_rows = np.asarray(train_rows)
        vocab = Vocabulary.build(table, train_rows)
        scaler = NumericScaler.fit(table.schema.numeric, table.numeric[train_rows])
        return cls(table.schema, vocab, scaler)

    def transform(self, table: TransactionTable, dtype=np.float64) -> FeatureMatrix:
        s = self.schema
        idx = {c: j for j, c in enumerate(s.categorical)}
        return FeatureMatrix(
            x_num=self.scaler.transform(table.numeric).astype(dtype),
            cat_index=self.vocab.encode(table),
            columns=s.categorical,
            tables={t: [idx[c] for c in getattr(s, t)] for t in TABLES},
            vocab_sizes=tuple(self.vocab.size(c) for c in s.categorical),
        )

    def to_dict(self) -> dict:
        s = self.schema
        return {"schema": {"card": list(s.card), "txn": list(s.txn), "mcht": list(s.mcht), "numeric": list(s.numeric)},
                "vocab": self.vocab.to_dict(), "scaler": self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        sd = d["schema"]
        schema = Schema(tuple(sd["card"]), tuple(sd["txn"]), tuple(sd["mcht"]), tuple(sd["numeric"]))
        return cls(schema, Vocabulary.from_dict(d["vocab"]), NumericScaler.from_dict(d["scaler"]))


def standardize(table: TransactionTable, scaler: NumericScaler) -> np.ndarray:
    return scaler.transform(table.numeric)
