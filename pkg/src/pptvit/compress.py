"""Token scoring, prune-or-pool policy selection and the compression kernels."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .exceptions import ScheduleError
from .flops import effective_removal, token_trajectory
from .tokens import TokenBatch
from .trace import LayerTrace, MergeMap, flatten_provenance

MODES = ("adaptive", "prune_only", "pool_only", "rule_based", "random", "inverted")
METRICS = ("score_variance", "mean_similarity")
SCORINGS = ("attention_times_vnorm", "attention_only")
POOLINGS = ("bsm", "dpc")
REDUCTIONS = ("size_weighted", "mean")
BUDGETS = ("exact", "capped")

DPC_CUTOFF_PERCENTILE = 20.0


class Policy(str, enum.Enum):
    PRUNE = "prune"
    POOL = "pool"

    def flipped(self):
        return Policy.POOL if self is Policy.PRUNE else Policy.PRUNE


@dataclass(frozen=True)
class PolicyDecision:
    policy: Policy
    statistic: float


@dataclass(frozen=True)
class CompressionSchedule:
    """Where to compress, how much, and how to choose between prune and pool.

    ``stages`` holds ``(layer, r)`` pairs with 1-based layer indices. ``tau``
    is the variance threshold (prune iff variance > tau); ``tau_sim`` is the
    threshold for the mean-similarity metric (pool iff similarity > tau_sim).
    ``budget="capped"`` limits every stage to half the image tokens, the
    capacity of one bipartite matching round.
    """

    stages: tuple = ()
    tau: float = 7e-5
    mode: str = "adaptive"
    metric: str = "score_variance"
    tau_sim: float = 0.5
    scoring: str = "attention_times_vnorm"
    pooling: str = "bsm"
    merge_reduction: str = "size_weighted"
    budget: str = "exact"
    random_seed: int = 0

    def __post_init__(self):
        stages = tuple((int(layer), int(r)) for layer, r in self.stages)
        object.__setattr__(self, "stages", tuple(sorted(stages)))
        for name, allowed in (("mode", MODES), ("metric", METRICS),
                              ("scoring", SCORINGS), ("pooling", POOLINGS),
                              ("merge_reduction", REDUCTIONS), ("budget", BUDGETS)):
            if getattr(self, name) not in allowed:
                raise ScheduleError(
                    f"{name} must be one of {allowed}, got {getattr(self, name)!r}"
                )
        if math.isnan(self.tau) or math.isnan(self.tau_sim):
            raise ScheduleError("thresholds must not be NaN")

    @classmethod
    def uniform(cls, layers, r, **kwargs):
        return cls(stages=tuple((layer, r) for layer in layers), **kwargs)

    def validate(self, config):
        """Raise ScheduleError if the stages cannot run on ``config``."""
        token_trajectory(config, self.stages, self.budget)

    def stage_index(self, layer):
        for i, (stage_layer, _) in enumerate(self.stages):
            if stage_layer == layer:
                return i
        return None


def significance_scores(byproducts, scoring="attention_times_vnorm"):
    """Normalized importance of each image token from the CLS attention row.

    Per head, the CLS attention to image token i is multiplied by the norm of
    its value vector (or used alone for ``attention_only``); the products are
    averaged over heads and normalized to sum to one.
    """
    attn = np.asarray(byproducts.cls_attention, dtype=np.float64)
    if attn.shape[-1] < 2:
        raise ValueError("scoring needs at least one image token")
    a = attn[:, 1:]
    if scoring == "attention_times_vnorm":
        a = a * np.asarray(byproducts.value_norms, dtype=np.float64)[:, 1:]
    elif scoring != "attention_only":
        raise ValueError(f"unknown scoring {scoring!r}")
    a = a.mean(axis=0)
    total = a.sum()
    if not total > 0:
        raise ValueError("all significance scores are zero")
    return a / total


def observe_variance(byproducts, scoring=None):
    return nm.population_variance(
        significance_scores(byproducts, scoring or "attention_times_vnorm")
    )


def mean_pairwise_similarity(features):
    """Mean cosine similarity over distinct pairs of rows."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        return 0.0
    sim = nm.cosine_similarity_matrix(features, features)
    return float((sim.sum() - np.trace(sim)) / (n * (n - 1)))


def select_policy(scores, schedule, stage_index, rng=None, features=None):
    """Decide between pruning and pooling for one stage.

    ``features`` (image-token features) is only needed for the
    mean-similarity metric; ``rng`` only for the random mode.
    """
    if schedule.metric == "score_variance":
        stat = nm.population_variance(scores)
        adaptive = Policy.PRUNE if stat > schedule.tau else Policy.POOL
    else:
        if features is None:
            raise ValueError("mean_similarity metric needs token features")
        stat = mean_pairwise_similarity(features)
        adaptive = Policy.POOL if stat > schedule.tau_sim else Policy.PRUNE

    mode = schedule.mode
    if mode == "adaptive":
        policy = adaptive
    elif mode == "inverted":
        policy = adaptive.flipped()
    elif mode == "prune_only":
        policy = Policy.PRUNE
    elif mode == "pool_only":
        policy = Policy.POOL
    elif mode == "rule_based":
        first_half = math.ceil(len(schedule.stages) / 2)
        policy = Policy.POOL if stage_index < first_half else Policy.PRUNE
    elif mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        policy = Policy.PRUNE if rng.coin() else Policy.POOL
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return PolicyDecision(policy, stat)


def _with_cls(batch, image_tokens, image_sizes):
    tokens = np.concatenate([batch.tokens[:1], image_tokens], axis=0)
    sizes = np.concatenate([batch.sizes[:1], image_sizes])
    return TokenBatch(tokens, sizes)


def reduce_groups(values, sizes, groups, reduction="size_weighted"):
    """Collapse rows of ``values`` into one row per group.

    Size-weighted: sum(s_i x_i) / sum(s_i). Mean: plain average. Sizes add
    either way; singleton groups are copied unchanged.
    """
    values = np.asarray(values)
    out = np.empty((len(groups), values.shape[1]), dtype=np.float32)
    out_sizes = np.empty(len(groups), dtype=np.float32)
    for k, g in enumerate(groups):
        if len(g) == 1:
            out[k] = values[g[0]]
            out_sizes[k] = sizes[g[0]]
            continue
        idx = list(g)
        s = np.asarray(sizes, dtype=np.float64)[idx]
        x = values[idx].astype(np.float64)
        if reduction == "size_weighted":
            out[k] = (s[:, None] * x).sum(axis=0) / s.sum()
        elif reduction == "mean":
            out[k] = x.mean(axis=0)
        else:
            raise ValueError(f"unknown reduction {reduction!r}")
        out_sizes[k] = s.sum()
    return out, out_sizes


def prune_topk(batch, scores, r):
    """Keep CLS and the ``N - 1 - r`` highest-scoring image tokens.

    Ties keep the lower index. Survivors stay in their original order and
    keep their sizes.
    """
    n_img = batch.n - 1
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n_img,):
        raise ValueError(f"expected {n_img} scores, got {scores.shape}")
    if not 0 <= r <= n_img - 1:
        raise ValueError(f"r={r} out of range [0, {n_img - 1}]")
    order = np.lexsort((np.arange(n_img), -scores))
    keep = np.sort(order[: n_img - r])
    drop = np.sort(order[n_img - r:])
    new = _with_cls(batch, batch.tokens[1 + keep], batch.sizes[1 + keep])
    delta = MergeMap(tuple((int(i),) for i in keep), tuple(int(i) for i in drop))
    return new, delta


def _image_metric(keys):
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim == 3:
        keys = keys.mean(axis=0)
    return keys[1:]


def bsm_groups(metric, r):
    """Bipartite soft matching over image-token rows of ``metric``.

    Even positions (0, 2, ...) are sources, odd positions destinations. Each
    source picks its most cosine-similar destination (lowest index on ties);
    the ``r`` strongest edges are kept (lowest source on ties) and each kept
    source folds into its destination. Returns the output groups in original
    order.
    """
    n_img = metric.shape[0]
    if not 0 <= r <= n_img // 2:
        raise ValueError(f"r={r} out of range [0, {n_img // 2}]")
    if r == 0:
        return tuple((i,) for i in range(n_img))
    src = np.arange(0, n_img, 2)
    dst = np.arange(1, n_img, 2)
    sim = nm.cosine_similarity_matrix(metric[src], metric[dst])
    best = sim.argmax(axis=1)
    best_sim = sim[np.arange(len(src)), best]
    edges = np.lexsort((np.arange(len(src)), -best_sim))[:r]
    absorbed = {}
    for e in edges:
        absorbed.setdefault(int(dst[best[e]]), []).append(int(src[e]))
    merged_src = {int(src[e]) for e in edges}
    groups = []
    for i in range(n_img):
        if i in merged_src:
            continue
        groups.append(tuple(sorted([i] + absorbed.get(i, []))))
    return tuple(groups)


def bsm_merge(batch, keys, r, reduction="size_weighted"):
    """One round of bipartite soft matching; removes exactly ``r`` tokens.

    ``keys`` are per-head (h, N, dh) or already head-averaged (N, dk); CLS is
    excluded from matching.
    """
    groups = bsm_groups(_image_metric(keys), r)
    x, s = reduce_groups(batch.tokens[1:], batch.sizes[1:], groups, reduction)
    return _with_cls(batch, x, s), MergeMap(groups)


def bsm_merge_rounds(batch, keys, r, reduction="size_weighted"):
    """Pool ``r`` tokens with as many matching rounds as needed.

    A single round removes at most half the image tokens; larger ``r``
    repeats the matching on the merged tokens, whose keys are combined the
    same way as their features.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim == 3:
        keys = keys.mean(axis=0)
    n_img0 = batch.n - 1
    deltas, remaining = [], r
    while remaining > 0:
        step = min(remaining, (batch.n - 1) // 2)
        if step == 0:
            raise ScheduleError(f"cannot pool {r} tokens from {n_img0} image tokens")
        groups = bsm_groups(keys[1:], step)
        k_img, _ = reduce_groups(keys[1:], batch.sizes[1:], groups, reduction)
        keys = np.concatenate([keys[:1], k_img.astype(np.float64)], axis=0)
        x, s = reduce_groups(batch.tokens[1:], batch.sizes[1:], groups, reduction)
        batch = _with_cls(batch, x, s)
        deltas.append(MergeMap(groups))
        remaining -= step
    if not deltas:
        return batch, MergeMap.identity(n_img0)
    return batch, flatten_provenance(deltas, n_img0)


def _cosine_distances(metric):
    d = 1.0 - nm.cosine_similarity_matrix(metric, metric)
    d = 0.5 * (d + d.T)
    d[d < nm.NORM_EPS] = 0.0
    np.fill_diagonal(d, 0.0)
    return d


def dpc_cutoff(distances):
    """20th percentile (linear interpolation) of the pairwise distances."""
    n = distances.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    return float(np.percentile(distances[iu], DPC_CUTOFF_PERCENTILE))


def dpc_groups(metric, r):
    """Density-peaks clustering of image tokens into ``n - r`` clusters.

    Cosine distance; density = neighbours within the cutoff; delta = distance
    to the nearest denser token (density ties: lower index is denser; the
    densest token gets its maximum distance). The densest token is always a
    center, the rest are chosen by largest density * delta. Every other token
    joins the cluster of its nearest denser token. Returns (groups, cutoff).
    """
    n = metric.shape[0]
    if not 0 <= r <= n - 1:
        raise ValueError(f"r={r} out of range [0, {n - 1}]")
    dist = _cosine_distances(metric)
    cutoff = dpc_cutoff(dist)
    if r == 0:
        return tuple((i,) for i in range(n)), cutoff
    rho = (dist <= cutoff).sum(axis=1) - 1
    order = np.lexsort((np.arange(n), -rho))
    delta = np.empty(n)
    parent = np.full(n, -1)
    delta[order[0]] = dist[order[0]].max()
    for p in range(1, n):
        i = order[p]
        denser = order[:p]
        dd = dist[i, denser]
        j = min(zip(dd, denser))[1]
        parent[i] = j
        delta[i] = dist[i, j]
    gamma = rho * delta
    rest = [i for i in np.lexsort((np.arange(n), -gamma)) if i != order[0]]
    centers = {int(order[0]), *(int(i) for i in rest[: n - r - 1])}
    label = np.empty(n, dtype=np.int64)
    for i in order:
        label[i] = i if i in centers else label[parent[i]]
    groups = tuple(
        tuple(int(i) for i in np.flatnonzero(label == c)) for c in sorted(centers)
    )
    return groups, cutoff


def dpc_merge(batch, features, r, reduction="size_weighted"):
    """Pool ``r`` tokens by density-peaks clustering of ``features``."""
    groups, _ = dpc_groups(_image_metric(features), r)
    x, s = reduce_groups(batch.tokens[1:], batch.sizes[1:], groups, reduction)
    return _with_cls(batch, x, s), MergeMap(groups)


def compress_stage(batch, byproducts, schedule, stage_index, rng=None):
    """Score, choose a policy, and remove the stage's tokens."""
    layer, r = schedule.stages[stage_index]
    n_in = batch.n
    scores = significance_scores(byproducts, schedule.scoring)
    decision = select_policy(scores, schedule, stage_index, rng, batch.tokens[1:])
    k = effective_removal(n_in, r, schedule.budget)
    if k > n_in - 2:
        raise ScheduleError(f"layer {layer}: cannot remove {k} of {n_in} tokens")

    cutoff = None
    if decision.policy is Policy.PRUNE:
        new, delta = prune_topk(batch, scores, k)
    elif schedule.pooling == "dpc":
        groups, cutoff = dpc_groups(_image_metric(byproducts.keys), k)
        x, s = reduce_groups(
            batch.tokens[1:], batch.sizes[1:], groups, schedule.merge_reduction
        )
        new, delta = _with_cls(batch, x, s), MergeMap(groups)
    else:
        new, delta = bsm_merge_rounds(
            batch, byproducts.keys, k, schedule.merge_reduction
        )

    trace = LayerTrace(
        layer_index=layer,
        token_count_in=n_in,
        token_count_out=new.n,
        policy=decision.policy.value,
        sop=decision.statistic,
        score_variance=nm.population_variance(scores),
        r=r,
        removed=k,
        merge_map_delta=delta,
        dpc_cutoff=cutoff,
    )
    return new, trace


class Compressor:
    """Per-forward-pass hook: owns the schedule and the random-policy rng."""

    def __init__(self, schedule):
        self.schedule = schedule
        self.rng = nm.Rng(schedule.random_seed)
        self._stages = {layer: i for i, (layer, _) in enumerate(schedule.stages)}

    def has_stage(self, layer_index):
        return layer_index in self._stages

    def compress(self, batch, byproducts, layer_index):
        return compress_stage(
            batch, byproducts, self.schedule, self._stages[layer_index], self.rng
        )
