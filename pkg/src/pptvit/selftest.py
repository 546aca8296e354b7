"""Oracle cross-checks runnable from the command line."""

from __future__ import annotations

import sys
import time

import numpy as np

from . import numeric as nm
from .compress import bsm_merge, prune_topk
from .engine import PRESETS
from .flops import model_flops
from .oracles import (
    attention_row,
    bsm_oracle,
    expand_duplicates,
    flops_reference,
    topk_oracle,
)
from .tokens import TokenBatch

# Exact totals from the closed-form count (stages at layers 4, 7, 10).
FLOPS_GOLDEN = {
    ("deit-ti", 0): 1_253_683_200,
    ("deit-s", 0): 4_598_882_304,
    ("deit-s", 50): 2_931_247_104,
    ("deit-b", 47): 11_593_910_784,
}


def _random_batch(rng, n, d):
    tokens = rng.normal(size=(n, d)).astype(np.float32)
    sizes = np.concatenate([[1.0], rng.integers(1, 4, size=n - 1)]).astype(np.float32)
    return TokenBatch(tokens, sizes)


def check_bsm(instances=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        n = int(rng.integers(2, 11))
        d = int(rng.integers(1, 9))
        batch = _random_batch(rng, n, d)
        keys = rng.normal(size=(n, d))
        r = int(rng.integers(0, (n - 1) // 2 + 1))
        out, delta = bsm_merge(batch, keys, r)
        groups, feats, sizes = bsm_oracle(keys[1:], batch.tokens[1:], batch.sizes[1:], r)
        if list(delta.groups) != groups:
            return False
        if not np.allclose(out.tokens[1:], feats, rtol=0, atol=1e-6):
            return False
        if not np.array_equal(out.sizes[1:], sizes):
            return False
    return True


def check_topk(instances=200, seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        n = int(rng.integers(2, 20))
        # coarse values so ties actually happen
        scores = rng.integers(0, 5, size=n - 1).astype(np.float64)
        scores /= max(scores.sum(), 1.0)
        r = int(rng.integers(0, n - 1))
        batch = _random_batch(rng, n, 3)
        _, delta = prune_topk(batch, scores, r)
        if [g[0] for g in delta.groups] != topk_oracle(scores, r):
            return False
    return True


def check_marginalization(instances=100, seed=2):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        n, dh = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        q = rng.normal(size=(1, dh))
        k = rng.normal(size=(n, dh))
        v = rng.normal(size=(n, dh))
        sizes = rng.integers(1, 5, size=n).astype(np.float64)
        merged, _ = nm.size_biased_attention(q, k, v, sizes)
        k2, v2, s2 = expand_duplicates(k, v, sizes)
        expanded = attention_row(q[0], k2, v2, s2)
        scale = max(np.abs(expanded).max(), 1e-12)
        if np.abs(merged[0] - expanded).max() / scale >= 1e-5:
            return False
    return True


def check_flops():
    for (preset, r), golden in FLOPS_GOLDEN.items():
        cfg = PRESETS[preset]
        stages = [(layer, r) for layer in (4, 7, 10)] if r else []
        ref = flops_reference(cfg.dim, cfg.depth, cfg.num_patches,
                              cfg.patch_size**2 * cfg.channels, cfg.num_classes, stages)
        if model_flops(cfg, stages).total != golden or ref != golden:
            return False
    return True


CHECKS = {
    "bsm_oracle": check_bsm,
    "topk_oracle": check_topk,
    "marginalization": check_marginalization,
    "flops_table": check_flops,
}


def run_selftest(out=None):
    """Run every check, print a pass/fail line each; True iff all pass."""
    out = out or sys.stdout
    ok = True
    for name, check in CHECKS.items():
        t0 = time.perf_counter()
        try:
            passed = check()
        except Exception as exc:  # a crash is a failure, report and continue
            print(f"  {name}: error {exc!r}", file=out)
            passed = False
        ok &= passed
        status = "PASS" if passed else "FAIL"
        print(f"{status}  {name:<16} {time.perf_counter() - t0:6.2f}s", file=out)
    return ok
