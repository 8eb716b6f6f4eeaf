import numpy as np
import pytest

from gtan.data import ingest_csv, write_csv
from gtan.experiments import Dataset, logistic_baseline, ratio_split
from gtan.graph import build_graph_from_table
from gtan.metrics import auc
from gtan.synth import SCHEMA, SynthConfig, SynthConfigError, describe, generate

from oracles import window_count_scores


@pytest.fixture(scope="module")
def default_set():
    return generate(SynthConfig())


def test_default_scale(default_set):
    t = default_set.table
    assert len(t) == 20_000 and len(np.unique(t.cardholder_id)) == 2_000
    assert default_set.truth.mean() == pytest.approx(0.05, abs=1e-9)
    assert default_set.labeled.sum() == 6_000
    assert t.schema == SCHEMA and t.is_sorted()


def test_observed_labels_agree_with_truth(default_set):
    ds = default_set
    np.testing.assert_array_equal(ds.table.label[ds.labeled], ds.truth[ds.labeled])
    assert np.all(ds.table.label[~ds.labeled] == -1)
    assert set(np.unique(ds.pattern[ds.truth == 1])) == {"burst", "escalation", "collusion"}
    assert np.all(ds.pattern[ds.truth == 0] == "")


def test_exact_labeled_count():
    ds = generate(SynthConfig(n_transactions=10_000, n_cardholders=1_000, labeled_fraction=0.1, seed=3))
    assert ds.labeled.sum() == 1_000


def test_zero_prevalence_all_legitimate():
    ds = generate(SynthConfig(n_transactions=2_000, n_cardholders=200, prevalence=0.0))
    assert ds.truth.sum() == 0 and np.all(ds.table.label[ds.labeled] == 0)


def test_infeasible_mix_rejected():
    with pytest.raises(SynthConfigError, match="capacity"):
        generate(SynthConfig(n_transactions=2_000, n_cardholders=20, prevalence=0.5, max_incidents_per_card=1))


def test_invalid_config_rejected():
    with pytest.raises(SynthConfigError):
        SynthConfig(labeled_fraction=0.0)
    with pytest.raises(SynthConfigError):
        SynthConfig(burst=0, escalation=0, collusion=0)


def test_byte_identical_csv_per_seed(tmp_path):
    cfg = SynthConfig(n_transactions=3_000, n_cardholders=300, seed=11)
    write_csv(generate(cfg).table, tmp_path / "a.csv")
    write_csv(generate(cfg).table, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    write_csv(generate(SynthConfig(n_transactions=3_000, n_cardholders=300, seed=12)).table, tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_csv_ingests_cleanly(tmp_path, default_set):
    write_csv(default_set.table, tmp_path / "d.csv")
    res = ingest_csv(tmp_path / "d.csv")
    assert res.errors == [] and len(res.table) == 20_000


def test_window_oracle_separates_bursts(default_set):
    ds = default_set
    keep = (ds.pattern == "burst") | (ds.truth == 0)
    scores = window_count_scores(ds.table.cardholder_id, ds.table.timestamp, ds.config.burst_window)
    assert auc(scores[keep], ds.truth[keep]) >= 0.95


def test_static_model_below_window_oracle(default_set):
    # two-hour window: wide enough for escalation chains, tight enough to miss daily routine
    ds = Dataset.from_synthetic(default_set)
    split = ratio_split(ds, 0.5, seed=0)
    static = logistic_baseline(ds, split).report.auc
    window = window_count_scores(ds.table.cardholder_id, ds.table.timestamp, 7200)
    assert static < auc(window[split.test], split.test_labels)


def test_describe_matches_bookkeeping(default_set):
    ds = default_set
    counts = describe(ds.table, 6, truth=ds.truth)
    assert counts["nodes"] == 20_000
    assert counts["fraud"] == int(ds.truth.sum()) and counts["legitimate"] == int((ds.truth == 0).sum())
    assert counts["edges"] == build_graph_from_table(ds.table, 6).n_temporal_edges
    observed = describe(ds.table)
    assert observed["unlabeled"] == int((~ds.labeled).sum())


def test_describe_empty():
    ds = generate(SynthConfig(n_transactions=100, n_cardholders=10))
    assert describe(ds.table.take(np.zeros(0, dtype=np.int64))) == {
        "nodes": 0, "edges": 0, "fraud": 0, "legitimate": 0, "unlabeled": 0}


def test_bursts_are_card_not_present(default_set):
    ds = default_set
    burst = ds.pattern == "burst"
    assert np.all(ds.table.categorical["mcht_terminal"][burst] == "virtual")
    # a lone burst purchase is not obviously odd: legitimate CNP traffic is common
    legit_cnp = np.mean(ds.table.categorical["mcht_terminal"][ds.truth == 0] == "virtual")
    assert legit_cnp > 0.25
