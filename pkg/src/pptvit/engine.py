"""Minimal ViT forward pass with size-biased attention and compression hooks."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import compress as compress_mod
from . import numeric as nm
from .exceptions import ConfigError, ImageError, NumericalError, WeightsError
from .flops import flops_from_counts
from .tokens import AttentionByproducts, TokenBatch  # noqa: F401
from .trace import LayerTrace, TraceReport, flatten_provenance


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    num_classes: int = 1000

    def __post_init__(self):
        for f in ("image_size", "patch_size", "channels", "dim", "depth", "heads",
                  "num_classes"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{f} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or (self.mlp_ratio * self.dim) % 1:
            raise ConfigError("mlp_ratio * dim must be a positive integer")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self):
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def hidden_dim(self):
        return int(self.mlp_ratio * self.dim)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


PRESETS = {
    "deit-ti": ModelConfig(dim=192, heads=3),
    "deit-s": ModelConfig(dim=384, heads=6),
    "deit-b": ModelConfig(dim=768, heads=12),
}


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray


# name suffix -> LayerWeights attribute; linear weights are stored (in, out)
_LAYER_TENSORS = {
    "norm1.weight": "ln1_g",
    "norm1.bias": "ln1_b",
    "attn.qkv.weight": "qkv_w",
    "attn.qkv.bias": "qkv_b",
    "attn.proj.weight": "proj_w",
    "attn.proj.bias": "proj_b",
    "norm2.weight": "ln2_g",
    "norm2.bias": "ln2_b",
    "mlp.fc1.weight": "fc1_w",
    "mlp.fc1.bias": "fc1_b",
    "mlp.fc2.weight": "fc2_w",
    "mlp.fc2.bias": "fc2_b",
}


def expected_shapes(config):
    """Canonical tensor names and shapes, in file order."""
    d, hd = config.dim, config.hidden_dim
    patch_in = config.patch_size**2 * config.channels
    shapes = {
        "patch_embed.weight": (patch_in, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (config.num_tokens, d),
    }
    layer = {
        "norm1.weight": (d,), "norm1.bias": (d,),
        "attn.qkv.weight": (d, 3 * d), "attn.qkv.bias": (3 * d,),
        "attn.proj.weight": (d, d), "attn.proj.bias": (d,),
        "norm2.weight": (d,), "norm2.bias": (d,),
        "mlp.fc1.weight": (d, hd), "mlp.fc1.bias": (hd,),
        "mlp.fc2.weight": (hd, d), "mlp.fc2.bias": (d,),
    }
    for i in range(config.depth):
        for k, shape in layer.items():
            shapes[f"blocks.{i}.{k}"] = shape
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


@dataclass
class ModelWeights:
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    layers: list
    norm_g: np.ndarray
    norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def from_tensors(cls, tensors, config):
        shapes = expected_shapes(config)
        missing = [k for k in shapes if k not in tensors]
        extra = [k for k in tensors if k not in shapes]
        if missing or extra:
            raise WeightsError(f"missing tensors {missing[:5]}, unexpected {extra[:5]}")
        t = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise WeightsError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise WeightsError(f"{name}: non-finite values")
            t[name] = np.ascontiguousarray(arr, dtype=np.float32)
        layers = [
            LayerWeights(**{attr: t[f"blocks.{i}.{k}"] for k, attr in _LAYER_TENSORS.items()})
            for i in range(config.depth)
        ]
        return cls(
            patch_w=t["patch_embed.weight"], patch_b=t["patch_embed.bias"],
            cls_token=t["cls_token"], pos_embed=t["pos_embed"], layers=layers,
            norm_g=t["norm.weight"], norm_b=t["norm.bias"],
            head_w=t["head.weight"], head_b=t["head.bias"],
        )

    def to_tensors(self):
        out = {
            "patch_embed.weight": self.patch_w,
            "patch_embed.bias": self.patch_b,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for i, layer in enumerate(self.layers):
            for k, attr in _LAYER_TENSORS.items():
                out[f"blocks.{i}.{k}"] = getattr(layer, attr)
        out["norm.weight"] = self.norm_g
        out["norm.bias"] = self.norm_b
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    @classmethod
    def synthetic(cls, config, seed=0, std=0.02):
        """Seeded Gaussian weights (std 0.02); zero biases, unit LayerNorm gains.

        Tensors are drawn in canonical file order from one generator.
        """
        rng = nm.Rng(seed)
        tensors = {}
        for name, shape in expected_shapes(config).items():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") \
                    or name == "norm.weight":
                tensors[name] = np.ones(shape, dtype=np.float32)
            elif name.endswith(".bias"):
                tensors[name] = np.zeros(shape, dtype=np.float32)
            else:
                size = int(np.prod(shape))
                tensors[name] = rng.normal(size, std).astype(np.float32).reshape(shape)
        return cls.from_tensors(tensors, config)


def check_image(image, config):
    image = np.asarray(image)
    expected = (config.image_size, config.image_size, config.channels)
    if image.shape != expected:
        raise ImageError(f"image shape {image.shape} does not match {expected}")
    if not np.all(np.isfinite(image)):
        raise ImageError("image contains non-finite values")
    return image.astype(np.float32)


def patchify(image, patch_size):
    """(H, W, C) -> (num_patches, p*p*C), patches row-major, pixels (y, x, c)."""
    h, w, c = image.shape
    p = patch_size
    return (
        image.reshape(h // p, p, w // p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(-1, p * p * c)
    )


def patch_embed(image, weights, config):
    image = check_image(image, config)
    patches = nm.matmul(patchify(image, config.patch_size), weights.patch_w)
    patches += weights.patch_b
    tokens = np.concatenate([weights.cls_token, patches], axis=0) + weights.pos_embed
    return TokenBatch(tokens, np.ones(config.num_tokens, dtype=np.float32))


def attention_forward(batch, layer, heads, size_bias=True):
    """Multi-head self-attention over ``batch.tokens`` with a ``log s`` key bias.

    Returns the projected attention output (no residual) and the per-head
    byproducts the compression policies consume.
    """
    x = batch.tokens
    n, d = x.shape
    dh = d // heads
    qkv = nm.matmul(x, layer.qkv_w) + layer.qkv_b
    qkv = qkv.astype(np.float64).reshape(n, 3, heads, dh).transpose(1, 2, 0, 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * dh**-0.5
    sizes = batch.sizes if size_bias else np.ones(n)
    try:
        attn = nm.softmax_size_biased(logits, sizes)
    except ValueError as exc:
        raise NumericalError(str(exc)) from None
    out = np.matmul(attn.astype(np.float64), v).transpose(1, 0, 2).reshape(n, d)
    out = nm.matmul(out, layer.proj_w) + layer.proj_b
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite attention output")
    byproducts = AttentionByproducts(
        cls_attention=attn[:, 0, :],
        value_norms=np.linalg.norm(v, axis=-1).astype(np.float32),
        keys=k.astype(np.float32),
    )
    return out, byproducts


def ffn_forward(x, layer):
    h = nm.gelu(nm.matmul(x, layer.fc1_w) + layer.fc1_b)
    return nm.matmul(h, layer.fc2_w) + layer.fc2_b


def block_forward(batch, layer, config, layer_index, compressor=None, observe=False):
    """One transformer block; compression runs between the MSA and FFN residuals."""
    n_in = batch.n
    normed = TokenBatch(nm.layernorm(batch.tokens, layer.ln1_g, layer.ln1_b), batch.sizes)
    attn_out, byproducts = attention_forward(normed, layer, config.heads)
    batch = TokenBatch(batch.tokens + attn_out, batch.sizes)

    if compressor is not None and compressor.has_stage(layer_index):
        batch, trace = compressor.compress(batch, byproducts, layer_index)
    else:
        trace = LayerTrace(layer_index, n_in, n_in)
        if observe and n_in >= 2:
            trace.score_variance = compress_mod.observe_variance(
                byproducts, compressor.schedule.scoring if compressor else None
            )

    x = batch.tokens
    x = x + ffn_forward(nm.layernorm(x, layer.ln2_g, layer.ln2_b), layer)
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite activations after layer {layer_index}")
    return TokenBatch(x, batch.sizes), trace


def forward_tokens(batch, weights, config, schedule=None, observe=False):
    """Run all blocks from an embedded batch; returns (logits, cls feature, traces)."""
    batch.check()
    compressor = None
    if schedule is not None:
        schedule.validate(config)
        compressor = compress_mod.Compressor(schedule)
    traces = []
    for i, layer in enumerate(weights.layers, start=1):
        batch, trace = block_forward(batch, layer, config, i, compressor, observe)
        traces.append(trace)
    cls_feat = nm.layernorm(batch.tokens[:1], weights.norm_g, weights.norm_b)
    logits = (nm.matmul(cls_feat, weights.head_w) + weights.head_b)[0]
    return logits, cls_feat[0], traces


def model_forward(image, weights, config, schedule=None, observe=False):
    """Classify one image; returns (logits, TraceReport)."""
    batch = patch_embed(image, weights, config)
    logits, _, traces = forward_tokens(batch, weights, config, schedule, observe)
    counts = [(t.token_count_in, t.token_count_out) for t in traces]
    deltas = [t.merge_map_delta for t in traces if t.merge_map_delta is not None]
    report = TraceReport(
        layers=traces,
        flops=flops_from_counts(config, counts),
        merge_map=flatten_provenance(deltas, config.num_patches),
        logits=logits,
    )
    return logits, report

