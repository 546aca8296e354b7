"""Slow reference implementations used by the self-test and the test suite.

They share only the scalar ``cosine_similarity`` with the fast kernels and are
written as plain loops so they can be read against the algorithm description.
"""

from __future__ import annotations

import math

import numpy as np

from .numeric import cosine_similarity


def bsm_oracle(metric, features, sizes, r):
    """Brute-force bipartite soft matching over image tokens.

    Returns ``(groups, merged_features, merged_sizes)`` with groups listed in
    output order.
    """
    n = len(metric)
    sources = [i for i in range(n) if i % 2 == 0]
    dests = [i for i in range(n) if i % 2 == 1]
    edges = []
    for s in sources:
        best_d, best_sim = None, -math.inf
        for d in dests:
            sim = cosine_similarity(metric[s], metric[d])
            if sim > best_sim:
                best_d, best_sim = d, sim
        edges.append((best_sim, s, best_d))
    edges.sort(key=lambda e: (-e[0], e[1]))

    members = {i: [i] for i in range(n)}
    acc = {i: np.asarray(features[i], dtype=np.float64) * float(sizes[i]) for i in range(n)}
    size = {i: float(sizes[i]) for i in range(n)}
    for _, s, d in edges[:r]:
        members[d] += members.pop(s)
        acc[d] = acc[d] + acc.pop(s)
        size[d] += size.pop(s)
    order = sorted(members)
    groups = [tuple(sorted(members[i])) for i in order]
    merged = np.array([acc[i] / size[i] for i in order])
    return groups, merged, np.array([size[i] for i in order])


def topk_oracle(scores, r):
    """Indices kept by Top-K with ties resolved toward the lower index."""
    n = len(scores)
    ranked = sorted(range(n), key=lambda i: (-float(scores[i]), i))
    return sorted(ranked[: n - r])


def attention_row(q, keys, values, sizes):
    """Size-biased attention output for one query, evaluated term by term."""
    scale = 1.0 / math.sqrt(len(q))
    logits = [float(np.dot(q, k)) * scale + math.log(s) for k, s in zip(keys, sizes)]
    m = max(logits)
    w = [math.exp(l - m) for l in logits]
    z = sum(w)
    out = np.zeros(len(values[0]))
    for wi, v in zip(w, values):
        out += (wi / z) * np.asarray(v, dtype=np.float64)
    return out


def expand_duplicates(keys, values, sizes):
    """Replace each token of integer size m by m copies of size one."""
    k2, v2 = [], []
    for k, v, s in zip(keys, values, sizes):
        for _ in range(int(round(s))):
            k2.append(k)
            v2.append(v)
    return np.array(k2), np.array(v2), np.ones(len(k2))


def flops_reference(dim, depth, num_patches, patch_in, classes, stages, mlp_ratio=4):
    """Closed-form FLOPs count with stages applied between MSA and FFN."""
    n = num_patches + 1
    total = num_patches * patch_in * dim + dim * classes
    removal = dict(stages)
    for layer in range(1, depth + 1):
        n_msa = n
        n -= removal.get(layer, 0)
        total += 4 * n_msa * dim**2 + 2 * n_msa**2 * dim + 2 * n * dim * mlp_ratio * dim
    return total
