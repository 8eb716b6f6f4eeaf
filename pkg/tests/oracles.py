"""Slow, direct reference implementations used as test oracles.

Each oracle is written independently of the library code it checks: plain
loops, dense matrices, no shared helpers.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------- metrics


def auc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def ap_enumerate(scores, labels) -> float:
    n_pos = sum(1 for y in labels if y == 1)
    prev_recall = 0.0
    ap = 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(predicted)
        precision = tp / len(predicted)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_macro_counts(scores, labels, threshold=0.5) -> float:
    def f1(pos_label):
        tp = sum(1 for s, y in zip(scores, labels) if (s >= threshold) == (pos_label == 1) and y == pos_label)
        pred = sum(1 for s in scores if (s >= threshold) == (pos_label == 1))
        actual = sum(1 for y in labels if y == pos_label)
        if pred + actual == 0:
            return 0.0
        return 2.0 * tp / (pred + actual)

    return (f1(1) + f1(0)) / 2.0


# ---------------------------------------------------------------- graph


def neighbours_bruteforce(cardholder, timestamp, txn_id, k) -> list[list[int]]:
    """In-neighbours of every node: its k latest same-card predecessors, oldest first, then itself."""
    n = len(cardholder)
    out = []
    for v in range(n):
        preds = [u for u in range(n)
                 if u != v and cardholder[u] == cardholder[v]
                 and (timestamp[u], txn_id[u]) < (timestamp[v], txn_id[v])]
        preds.sort(key=lambda u: (timestamp[u], txn_id[u]))
        out.append(preds[-k:] + [v] if k > 0 else [v])
    return out


def bfs_in_edges(neighbours: list[list[int]], centers, hops: int) -> set[int]:
    seen = set(int(c) for c in centers)
    frontier = set(seen)
    for _ in range(hops):
        nxt = set()
        for v in frontier:
            for u in neighbours[v]:
                if u not in seen:
                    nxt.add(u)
        seen |= nxt
        frontier = nxt
    return seen


# ---------------------------------------------------------------- synthetic data


def window_count_scores(cardholder, timestamp, window: int) -> np.ndarray:
    """Number of other same-card transactions within ``window`` seconds of each row."""
    n = len(cardholder)
    out = np.zeros(n)
    for i in range(n):
        j = i - 1
        while j >= 0 and cardholder[j] == cardholder[i] and timestamp[i] - timestamp[j] <= window:
            out[i] += 1
            j -= 1
        j = i + 1
        while j < n and cardholder[j] == cardholder[i] and timestamp[j] - timestamp[i] <= window:
            out[i] += 1
            j += 1
    return out


# ---------------------------------------------------------------- model


def _leaky(v, slope=0.01):
    return np.where(v > 0, v, slope * v)


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def reference_forward(params: dict, columns, tables, cat_index, x_num, risk_idx, neighbours, centers,
                      layers: int, heads: int, variant: str = "full", head_activation: str = "identity"):
    """Straight-line GTAN forward over the whole graph with dense adjacency.

    ``params`` maps names to plain arrays, ``neighbours[v]`` lists v's
    in-neighbours (self-loop included). Returns center probabilities and
    per-layer attention as dense (n, n, heads) arrays.
    """
    n = len(cat_index)
    d = params["risk.w"].shape[1]
    dh = d // heads
    x_cat = np.zeros((n, d))
    for t in ("card", "txn", "mcht"):
        cols = tables.get(t) or []
        if not cols:
            continue
        acc = np.zeros((n, d))
        for j in cols:
            acc += params[f"emb.{columns[j]}"][cat_index[:, j]]
        hidden = _leaky(acc @ params[f"mlp.{t}.w1"] + params[f"mlp.{t}.b1"])
        x_cat += hidden @ params[f"mlp.{t}.w2"] + params[f"mlp.{t}.b2"]
    xn = x_num @ params["num.w"] + params["num.b"]
    x = xn + x_cat
    if variant != "no-risk":
        w = params["risk.w"].copy()
        w[2] = 0.0
        x = x + w[risk_idx]
    H = x
    alphas = []
    for layer in range(layers):
        A = np.zeros((n, n, heads))
        agg = np.zeros((n, d))
        for i in range(n):
            nb = neighbours[i]
            for hd in range(heads):
                if variant == "no-attention":
                    w_nb = np.full(len(nb), 1.0 / len(nb))
                else:
                    a_src = params[f"layer{layer}.att_src"][:, hd]
                    a_dst = params[f"layer{layer}.att_dst"][:, hd]
                    e = np.array([_leaky(H[t] @ a_src + H[i] @ a_dst) for t in nb])
                    e = np.exp(e - e.max())
                    w_nb = e / e.sum()
                for t, a in zip(nb, w_nb):
                    A[i, t, hd] = a
                    agg[i, hd * dh:(hd + 1) * dh] += a * H[t, hd * dh:(hd + 1) * dh]
        if head_activation == "sigmoid":
            agg = _sig(agg)
        h = agg @ params[f"layer{layer}.w_o"]
        gate = _sig(np.concatenate([x_cat, xn, h], axis=1) @ params[f"layer{layer}.gate"])
        H = gate * h + (1.0 - gate) * H
        alphas.append(A)
    z = H[centers] @ params["head.w0"] + params["head.b0"]
    slope = float(params["head.prelu"][0])
    z = np.where(z > 0, z, slope * z)
    return _sig(z @ params["head.w1"] + params["head.b1"])[:, 0], alphas


def bce(p, y) -> float:
    return -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / len(p)
