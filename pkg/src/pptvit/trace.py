"""Per-layer traces, token provenance and patch-map rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import ImageError

# Fixed palette for merged-group overlays; index = rank of the group's
# smallest patch index among all drawn groups, modulo 32.
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (0, 0, 0), (31, 119, 180), (255, 127, 14),
    (44, 160, 44), (214, 39, 40), (148, 103, 189), (140, 86, 75),
    (227, 119, 194), (188, 189, 34), (23, 190, 207), (255, 99, 71),
)
PRUNE_DIM = 0.25
TINT_ALPHA = 0.4


@dataclass(frozen=True)
class MergeMap:
    """Partition of input tokens into output groups plus a pruned set.

    As a per-stage delta, indices refer to the stage's input image tokens
    (0-based, CLS excluded) and ``groups[k]`` lists the inputs folded into
    output image token ``k``. After flattening, indices are original patch
    indices.
    """

    groups: tuple
    pruned: tuple = ()

    @classmethod
    def identity(cls, n):
        return cls(tuple((i,) for i in range(n)), ())

    @property
    def n_inputs(self):
        return sum(len(g) for g in self.groups) + len(self.pruned)

    def validate(self, n_inputs):
        seen = [i for g in self.groups for i in g] + list(self.pruned)
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty merge group")
        if sorted(seen) != list(range(n_inputs)):
            raise ValueError(f"merge map is not a partition of range({n_inputs})")

    def to_dict(self):
        return {
            "groups": [list(g) for g in self.groups],
            "pruned": list(self.pruned),
        }


def flatten_provenance(deltas: Sequence[MergeMap], num_patches: int) -> MergeMap:
    """Compose per-stage deltas into a map over the original patches."""
    current = [(p,) for p in range(num_patches)]
    pruned = []
    for k, delta in enumerate(deltas):
        try:
            delta.validate(len(current))
        except ValueError as exc:
            raise ValueError(f"stage {k}: {exc}") from None
        for i in delta.pruned:
            pruned.extend(current[i])
        current = [
            tuple(sorted(p for i in g for p in current[i])) for g in delta.groups
        ]
    out = MergeMap(tuple(current), tuple(sorted(pruned)))
    out.validate(num_patches)
    return out


@dataclass
class LayerTrace:
    layer_index: int
    token_count_in: int
    token_count_out: int
    policy: Optional[str] = None
    sop: Optional[float] = None
    score_variance: Optional[float] = None
    r: Optional[int] = None
    removed: Optional[int] = None
    merge_map_delta: Optional[MergeMap] = None
    dpc_cutoff: Optional[float] = None

    def to_dict(self):
        return {
            "layer_index": self.layer_index,
            "token_count_in": self.token_count_in,
            "token_count_out": self.token_count_out,
            "policy": self.policy,
            "sop": self.sop,
            "score_variance": self.score_variance,
            "r": self.r,
            "removed": self.removed,
            "merge_map_delta": (
                None if self.merge_map_delta is None else self.merge_map_delta.to_dict()
            ),
            "dpc_cutoff": self.dpc_cutoff,
        }


@dataclass
class TraceReport:
    layers: list
    flops: object
    merge_map: MergeMap
    logits: np.ndarray = field(repr=False)

    @property
    def top1(self):
        return int(np.argmax(self.logits))

    @property
    def policies(self):
        return [t.policy for t in self.layers if t.policy is not None]

    def to_dict(self):
        return {
            "layers": [t.to_dict() for t in self.layers],
            "flops": self.flops.to_dict(),
            "merge_map": self.merge_map.to_dict(),
            "logits": [float(v) for v in self.logits],
            "top1": self.top1,
        }


def render_patch_map(image, merge_map: MergeMap, config):
    """Draw pruned patches darkened and merged groups outlined and tinted.

    ``image`` is an (H, W, 3) uint8 array matching ``config``. Pruned
    patches are scaled by 0.25 (floored). Every group of two or more patches
    gets a palette color: its patches are blended 60/40 with that color and
    framed by a solid border of width ``max(1, patch_size // 8)``.
    """
    image = np.asarray(image)
    side = config.image_size
    if image.shape != (side, side, 3) or image.dtype != np.uint8:
        raise ImageError(
            f"expected uint8 image of shape {(side, side, 3)}, got "
            f"{image.dtype} {image.shape}"
        )
    merge_map.validate(config.num_patches)
    p = config.patch_size
    per_row = side // p
    out = image.astype(np.float64)

    def region(idx):
        r, c = divmod(idx, per_row)
        return slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p)

    for idx in merge_map.pruned:
        rs, cs = region(idx)
        out[rs, cs] = np.floor(out[rs, cs] * PRUNE_DIM)

    border = max(1, p // 8)
    drawn = sorted((g for g in merge_map.groups if len(g) >= 2), key=min)
    for rank, group in enumerate(drawn):
        color = np.array(PALETTE[rank % len(PALETTE)], dtype=np.float64)
        for idx in group:
            rs, cs = region(idx)
            tile = out[rs, cs]
            tile[:] = np.round((1 - TINT_ALPHA) * tile + TINT_ALPHA * color)
            tile[:border, :] = color
            tile[-border:, :] = color
            tile[:, :border] = color
            tile[:, -border:] = color
    return out.astype(np.uint8)


def variance_series(reports: Sequence[TraceReport]):
    """Per-layer mean of the significance-score variance across reports.

    Layers without a recorded variance in any report are skipped; run the
    forward pass in observe mode to get every layer.
    """
    if not reports:
        raise ValueError("variance series needs at least one trace")
    sums, counts = {}, {}
    for rep in reports:
        for t in rep.layers:
            if t.score_variance is None:
                continue
            sums[t.layer_index] = sums.get(t.layer_index, 0.0) + t.score_variance
            counts[t.layer_index] = counts.get(t.layer_index, 0) + 1
    return [(layer, sums[layer] / counts[layer]) for layer in sorted(sums)]


def variance_series_csv(series):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "mean_variance"])
    for layer, value in series:
        writer.writerow([layer, repr(float(value))])
    return buf.getvalue()
