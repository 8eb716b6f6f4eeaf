import dataclasses

import numpy as np
import pytest

from gtan.graph import (GraphError, build_graph, build_graph_from_table, graph_provenance, load_graph,
                        sample_batch, save_graph, verify_no_future_edges)
from gtan.synth import SynthConfig, describe, generate

from conftest import random_table
from oracles import bfs_in_edges, neighbours_bruteforce


def _lists(graph):
    return [graph.neighbors(v).tolist() for v in range(graph.n_nodes)]


def test_three_transactions_one_card():
    g = build_graph([1, 1, 1], [10, 20, 30], [0, 1, 2], max_edges=6)
    assert _lists(g) == [[0], [0, 1], [0, 1, 2]]
    assert g.n_temporal_edges == 3


def test_truncation_keeps_latest_predecessor():
    g = build_graph([1, 1, 1], [10, 20, 30], [0, 1, 2], max_edges=1)
    assert _lists(g) == [[0], [0, 1], [1, 2]]


def test_equal_timestamps_ordered_by_id():
    g = build_graph([4, 4], [50, 50], [3, 8], max_edges=6)
    assert _lists(g) == [[0], [0, 1]]


def test_two_cards_never_connect():
    g = build_graph([1, 1, 2, 2], [5, 6, 1, 9], [0, 1, 2, 3], max_edges=6)
    assert _lists(g) == [[0], [0, 1], [2], [2, 3]]


def test_unsorted_input_rejected():
    with pytest.raises(GraphError, match="sorted"):
        build_graph([1, 1], [20, 10], [0, 1])


def test_zero_max_edges_rejected():
    with pytest.raises(GraphError):
        build_graph([1], [1], [1], max_edges=0)


@pytest.mark.parametrize("seed", range(5))
def test_matches_bruteforce_oracle(seed):
    table = random_table(np.random.default_rng(seed), 150, 9, span=50)  # narrow span: many equal timestamps
    g = build_graph_from_table(table, 6)
    brute = neighbours_bruteforce(table.cardholder_id.tolist(), table.timestamp.tolist(),
                                  table.txn_id.tolist(), 6)
    assert _lists(g) == brute
    assert g.in_degree().max() <= 7


def test_describe_edges_match_graph():
    table = random_table(np.random.default_rng(11), 300, 12)
    for k in (1, 2, 6):
        assert describe(table, k)["edges"] == build_graph_from_table(table, k).n_temporal_edges


def test_describe_counts():
    table = random_table(np.random.default_rng(12), 200, 5)
    c = describe(table)
    assert c["fraud"] + c["legitimate"] + c["unlabeled"] == c["nodes"] == 200


def test_verify_flags_corrupted_edge():
    g = build_graph([1, 1, 1, 2], [10, 20, 30, 5], [0, 1, 2, 3], max_edges=6)
    assert verify_no_future_edges(g) == []
    indices = g.indices.copy()
    # node 1's first in-edge now comes from node 2, which is later
    indices[g.indptr[1]] = 2
    bad = verify_no_future_edges(dataclasses.replace(g, indices=indices))
    assert [(v.source, v.target, v.reason) for v in bad] == [(2, 1, "future source")]
    indices[g.indptr[1]] = 3
    bad = verify_no_future_edges(dataclasses.replace(g, indices=indices))
    assert bad[0].reason == "different cardholder"


def test_verify_scans_a_million_edges():
    # temporal validity expressed directly: every edge source is no later than its target
    n_cards, per = 20_000, 12
    card = np.repeat(np.arange(n_cards), per)
    ts = np.tile(np.arange(per) * 60, n_cards)
    g = build_graph(card, ts, np.arange(len(card)), max_edges=10)
    assert g.n_edges >= 1_000_000
    assert verify_no_future_edges(g) == []
    assert np.all(g.timestamp[g.indices] <= g.timestamp[g.edge_targets()])


def test_save_load_round_trip(tmp_path):
    table = random_table(np.random.default_rng(13), 120, 7)
    g = build_graph_from_table(table, 4)
    path = tmp_path / "g.bin"
    save_graph(g, path, provenance="command: test\nseed: 4")
    back = load_graph(path)
    for field in ("indptr", "indices", "timestamp", "cardholder", "txn_id"):
        np.testing.assert_array_equal(getattr(back, field), getattr(g, field))
    assert back.max_edges == 4
    assert graph_provenance(path) == "command: test\nseed: 4"


def test_load_rejects_bad_files(tmp_path):
    g = build_graph([1, 1], [1, 2], [0, 1])
    path = tmp_path / "g.bin"
    save_graph(g, path)
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:40])
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(GraphError, match="truncated"):
        load_graph(tmp_path / "short.bin")
    with pytest.raises(GraphError, match="not a graph"):
        load_graph(tmp_path / "magic.bin")


# ---------------------------------------------------------------- batch subgraphs


@pytest.mark.parametrize("hops", [1, 2, 3])
def test_batch_nodes_match_bfs(hops):
    table = random_table(np.random.default_rng(20 + hops), 200, 6)
    g = build_graph_from_table(table, 3)
    centers = np.random.default_rng(hops).choice(200, size=15, replace=False)
    b = sample_batch(g, centers, hops)
    np.testing.assert_array_equal(b.nodes[:15], centers)
    assert set(b.nodes.tolist()) == bfs_in_edges(_lists(g), centers, hops)
    assert len(set(b.nodes.tolist())) == len(b.nodes)


def test_batch_blocks_reproduce_in_edges():
    table = random_table(np.random.default_rng(30), 100, 4)
    g = build_graph_from_table(table, 2)
    b = sample_batch(g, [5, 50, 90], hops=2)
    for hop in range(2):
        src, dst, n_dst = b.block(hop)
        assert n_dst == b.hop_sizes[hop]
        for local in range(n_dst):
            got = sorted(b.nodes[src[dst == local]].tolist())
            assert got == sorted(g.neighbors(int(b.nodes[local])).tolist())
        assert np.all(np.diff(dst) >= 0)


def test_batch_rejects_duplicates_and_empty():
    g = build_graph([1, 1], [1, 2], [0, 1])
    with pytest.raises(GraphError):
        sample_batch(g, [0, 0], 1)
    with pytest.raises(GraphError):
        sample_batch(g, [], 1)


def test_fanout_sampling_keeps_self_loop():
    g = build_graph(np.zeros(20, int), np.arange(20), np.arange(20), max_edges=10)
    b = sample_batch(g, [19], 1, rng=np.random.default_rng(0), fanout=3)
    src, dst, _ = b.block(0)
    assert len(src) == 4 and b.nodes[src[-1]] == 19


@pytest.mark.parametrize("seed", range(3))
def test_synthetic_graph_is_causal(seed):
    ds = generate(SynthConfig(n_transactions=3000, n_cardholders=150, seed=seed))
    g = build_graph_from_table(ds.table, 6)
    assert verify_no_future_edges(g) == []
    assert g.in_degree().max() <= 7
