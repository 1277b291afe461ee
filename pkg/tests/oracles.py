"""Scalar reference implementations used as test oracles.

Everything here is plain Python over nested lists so it shares no code path
with the vectorized torch implementations under test.
"""

from __future__ import annotations

import itertools
import math


def matvec_rows(H, W):
    """Rows of H (n x d) times W (d x h)."""
    return [[sum(row[k] * W[k][c] for k in range(len(row))) for c in range(len(W[0]))] for row in H]


def leaky(x, slope=0.01):
    return x if x >= 0 else slope * x


def rotate(v, pos, base=10000.0):
    h = len(v)
    out = [0.0] * h
    for t in range(h // 2):
        ang = pos * base ** (-2 * t / h)
        c, s = math.cos(ang), math.sin(ang)
        a, b = v[2 * t], v[2 * t + 1]
        out[2 * t] = a * c - b * s
        out[2 * t + 1] = a * s + b * c
    return out


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def score_cell(H, W_s, W_e, W_p, U, i, j, use_rope=True, slope=0.01, base=10000.0):
    hs = [leaky(x, slope) for x in matvec_rows([H[i]], W_s)[0]]
    he = [leaky(x, slope) for x in matvec_rows([H[j]], W_e)[0]]
    bil = sum(hs[a] * U[a][b] * he[b] for a in range(len(hs)) for b in range(len(he)))
    if not use_rope:
        return bil
    qi = rotate(matvec_rows([H[i]], W_p)[0], i, base)
    qj = rotate(matvec_rows([H[j]], W_p)[0], j, base)
    return bil + dot(qi, qj)


def span_loss_direct(R, gold_cells):
    """log(1 + sum_pos e^{-r}) + log(1 + sum_neg e^{r}) without any stabilization."""
    n = len(R)
    pos = set(gold_cells)
    neg = [(i, j) for i in range(n) for j in range(i, n) if (i, j) not in pos]
    return math.log(1 + sum(math.exp(-R[i][j]) for i, j in pos)) + math.log(1 + sum(math.exp(R[i][j]) for i, j in neg))


def top_cells(R, k_shot):
    n = len(R)
    cells = [(i, j) for i in range(n) for j in range(i, n)]
    cells.sort(key=lambda c: (-R[c[0]][c[1]], c[0], c[1]))
    return cells[: 3 * k_shot]


def knn_oracle(u, bank_rows, bank_labels, k, types):
    """Label distribution following the documented contract, by brute force."""
    d = len(u)
    sims = [dot(r, u) / math.sqrt(d) for r in bank_rows]
    order = sorted(range(len(sims)), key=lambda j: (-sims[j], j))[: min(k, len(sims))]
    mass = {t: 0.0 for t in types}
    hit = set()
    for j in order:
        mass[bank_labels[j]] += sims[j]
        hit.add(bank_labels[j])
    lo = min(mass[t] for t in hit)
    if lo < 0:
        for t in hit:
            mass[t] -= lo
    total = sum(mass[t] for t in hit)
    if total <= 0:
        return [1.0 / len(hit) if t in hit else 0.0 for t in types]
    return [mass[t] / total if t in hit else 0.0 for t in types]


def f1_oracle(pred, gold):
    """pred/gold: dict sid -> list of (s, e, label). Counts by explicit matching."""
    tp = fp = fn = 0
    for sid in set(pred) | set(gold):
        p = list(pred.get(sid, []))
        g = list(gold.get(sid, []))
        matched = [False] * len(g)
        for x in p:
            for idx, y in enumerate(g):
                if not matched[idx] and x == y:
                    matched[idx] = True
                    tp += 1
                    break
            else:
                fp += 1
        fn += matched.count(False)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return tp, fp, fn, f1


def breakdown_oracle(pred, gold):
    span_err = type_err = 0
    for sid, items in pred.items():
        g = gold.get(sid, [])
        for x in items:
            if x in g:
                continue
            if any(x[0] == y[0] and x[1] == y[1] for y in g):
                type_err += 1
            else:
                span_err += 1
    total = span_err + type_err
    if not total:
        return 0.0, 0.0
    return span_err / total, type_err / total


def all_spans(n):
    return list(itertools.combinations_with_replacement(range(n), 2))
