"""Analytical FLOPs model for a ViT under a token-compression schedule.

One multiply-accumulate counts as one FLOP. LayerNorm, GELU, softmax and
the size-bias addition are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass

from .exceptions import ScheduleError


@dataclass(frozen=True)
class LayerFlops:
    layer_index: int
    token_count_msa: int
    token_count_ffn: int
    msa_flops: int
    ffn_flops: int


@dataclass(frozen=True)
class FlopsReport:
    layers: tuple
    patch_embed_flops: int
    head_flops: int
    total: int
    baseline_total: int

    @property
    def reduction_percent(self):
        return 100.0 * (1.0 - self.total / self.baseline_total)

    @property
    def gflops(self):
        return self.total / 1e9

    def to_dict(self):
        return {
            "layers": [
                {
                    "layer_index": l.layer_index,
                    "token_count_msa": l.token_count_msa,
                    "token_count_ffn": l.token_count_ffn,
                    "msa_flops": l.msa_flops,
                    "ffn_flops": l.ffn_flops,
                }
                for l in self.layers
            ],
            "patch_embed_flops": self.patch_embed_flops,
            "head_flops": self.head_flops,
            "total": self.total,
            "baseline_total": self.baseline_total,
            "reduction_percent": self.reduction_percent,
        }


def block_flops(n_msa, n_ffn, config):
    """MSA and FFN cost of one block.

    MSA: QKV and output projections (4 n d^2) plus the QK^T and AV
    products (2 n^2 d). FFN: two linear layers (2 n d hidden).
    """
    if n_msa < 1 or n_ffn < 1:
        raise ValueError("token counts must be >= 1")
    d = config.dim
    msa = 4 * n_msa * d * d + 2 * n_msa * n_msa * d
    ffn = 2 * n_ffn * d * config.hidden_dim
    return msa, ffn


def effective_removal(n_tokens, r, budget="exact"):
    """Tokens a stage removes from a batch of ``n_tokens`` (CLS included).

    ``exact`` removes ``r``. ``capped`` removes at most half of the image
    tokens, the limit of a single bipartite matching round.
    """
    if budget == "exact":
        return r
    if budget == "capped":
        return min(r, (n_tokens - 1) // 2)
    raise ValueError(f"unknown budget {budget!r}")


def token_trajectory(config, stages, budget="exact"):
    """(n_msa, n_ffn) per layer; compression sits between MSA and FFN."""
    by_layer = {}
    for layer, r in stages:
        if not 1 <= layer <= config.depth:
            raise ScheduleError(f"stage layer {layer} outside [1, {config.depth}]")
        if layer in by_layer:
            raise ScheduleError(f"duplicate stage at layer {layer}")
        if r < 0:
            raise ScheduleError(f"negative r at layer {layer}")
        by_layer[layer] = r
    n = config.num_tokens
    counts = []
    for layer in range(1, config.depth + 1):
        n_msa = n
        if layer in by_layer:
            n -= effective_removal(n, by_layer[layer], budget)
            if n < 2:
                raise ScheduleError(
                    f"schedule removes too many tokens by layer {layer} "
                    f"(CLS plus one image token must survive)"
                )
        counts.append((n_msa, n))
    return counts


def flops_from_counts(config, counts):
    layers = []
    for i, (n_msa, n_ffn) in enumerate(counts, start=1):
        msa, ffn = block_flops(n_msa, n_ffn, config)
        layers.append(LayerFlops(i, n_msa, n_ffn, msa, ffn))
    patch = config.num_patches * config.channels * config.patch_size**2 * config.dim
    head = config.dim * config.num_classes
    total = patch + head + sum(l.msa_flops + l.ffn_flops for l in layers)
    n0 = config.num_tokens
    baseline = patch + head + config.depth * sum(block_flops(n0, n0, config))
    return FlopsReport(tuple(layers), patch, head, total, baseline)


def model_flops(config, stages=(), budget="exact"):
    """FLOPs report for ``config`` with ``stages`` as (layer, r) pairs."""
    return flops_from_counts(config, token_trajectory(config, stages, budget))
