"""Token batches and the attention byproducts handed to the compressors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TokenBatch:
    """Token features (N, d) and per-token sizes; row 0 is the CLS token."""

    tokens: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.sizes = np.asarray(self.sizes, dtype=np.float32)
        if self.tokens.ndim != 2 or self.sizes.shape != (self.tokens.shape[0],):
            raise ValueError(
                f"tokens {self.tokens.shape} and sizes {self.sizes.shape} disagree"
            )

    @property
    def n(self):
        return self.tokens.shape[0]

    def check(self):
        if self.n < 1 or self.sizes[0] != 1:
            raise ValueError("row 0 must be the CLS token with size 1")
        if np.any(self.sizes < 1):
            raise ValueError("token sizes must be >= 1")


@dataclass
class AttentionByproducts:
    """Per-head quantities from one MSA evaluation.

    ``cls_attention`` is (h, N), ``value_norms`` is (h, N), ``keys`` is
    (h, N, d/h).
    """

    cls_attention: np.ndarray
    value_norms: np.ndarray
    keys: np.ndarray

    def head_mean_keys(self):
        return self.keys.astype(np.float64).mean(axis=0)
