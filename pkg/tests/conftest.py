from __future__ import annotations

import numpy as np
import pytest

from gtan.data import Preprocessor, Schema, TransactionTable
from gtan.graph import build_graph_from_table
from gtan.model import FeatureLayout, GtanConfig, GtanModel

TINY_SCHEMA = Schema(card=("card_type",), txn=("txn_channel",), mcht=("mcht_category", "mcht_id"),
                     numeric=("num_amount", "num_hour"))


def central_difference(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor for tiny entries."""
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def random_table(rng: np.random.Generator, n: int, n_cards: int, labeled: float = 0.5,
                 schema: Schema = TINY_SCHEMA, span: int = 10_000) -> TransactionTable:
    cards = rng.integers(0, n_cards, size=n)
    ts = rng.integers(0, span, size=n)
    tokens = {
        "card_type": np.array(["visa", "master", "amex"], dtype=object),
        "txn_channel": np.array(["pos", "online"], dtype=object),
        "mcht_category": np.array(["grocery", "fuel", "travel", "digital"], dtype=object),
        "mcht_id": np.array([f"m{i}" for i in range(6)], dtype=object),
    }
    cat = {c: tokens[c][rng.integers(0, len(tokens[c]), size=n)] for c in schema.categorical}
    numeric = np.column_stack([np.round(rng.lognormal(3, 1, size=n), 2), rng.uniform(0, 24, size=n)])
    truth = (rng.random(n) < 0.3).astype(np.int8)
    label = np.where(rng.random(n) < labeled, truth, -1).astype(np.int8)
    table = TransactionTable(schema, np.arange(n, dtype=np.int64), cards.astype(np.int64), ts.astype(np.int64),
                             cat, numeric[:, : len(schema.numeric)], label)
    return table.sorted()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_setup():
    """A 16-row table with its graph, features and a small float64 model."""
    r = np.random.default_rng(7)
    table = random_table(r, 16, 3)
    graph = build_graph_from_table(table, 3)
    pre = Preprocessor.fit(table, np.arange(len(table)))
    feats = pre.transform(table)
    cfg = GtanConfig(hidden_dim=8, heads=2, layers=2, max_edges=3, dropout=0.0)
    model = GtanModel(cfg, FeatureLayout.of(feats), seed=3)
    return table, graph, feats, model


# one summary line per acceptance criterion, shown at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
