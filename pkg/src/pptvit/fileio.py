"""Weight files, PPM images and deterministic JSON output.

Weight file layout::

    b"PPTW" | u32 little-endian header length | UTF-8 JSON header | payload

The header is ``{"version": 1, "config": {...}, "tensors": [{"name",
"shape", "dtype": "f32", "offset"}, ...]}``; offsets are byte offsets into
the payload, which holds little-endian float32 data.
"""

from __future__ import annotations

import json
import re
import struct

import numpy as np

from .engine import ModelWeights, expected_shapes
from .exceptions import ImageError, WeightsError

MAGIC = b"PPTW"
VERSION = 1


def dumps_json(obj):
    """Sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_weights(path, weights, config):
    tensors = weights.to_tensors()
    entries, chunks, offset = [], [], 0
    for name in expected_shapes(config):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": VERSION, "config": config.to_dict(), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def read_weight_tensors(path):
    """Parse a weight file into ``(header, {name: float32 array})``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise WeightsError(f"cannot read {path}: {exc}") from None
    if len(data) < 8 or data[:4] != MAGIC:
        raise WeightsError("not a PPTW weight file")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise WeightsError("truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsError(f"bad header: {exc}") from None
    if not isinstance(header, dict) or header.get("version") != VERSION:
        raise WeightsError(f"unsupported weight file version {header.get('version')!r}")
    payload = memoryview(data)[8 + hlen :]
    tensors, spans = {}, []
    for entry in header.get("tensors", []):
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            dtype, offset = entry["dtype"], int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise WeightsError(f"malformed tensor entry {entry!r}") from None
        if dtype != "f32":
            raise WeightsError(f"{name}: unsupported dtype {dtype!r}")
        if name in tensors:
            raise WeightsError(f"duplicate tensor {name}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(payload):
            raise WeightsError(f"{name}: data out of bounds")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = (
            np.frombuffer(payload[offset : offset + nbytes], dtype="<f4")
            .astype(np.float32)
            .reshape(shape)
        )
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise WeightsError(f"tensors {a} and {b} overlap")
    return header, tensors


def read_weights(path, config):
    header, tensors = read_weight_tensors(path)
    echo = header.get("config")
    if echo is not None and echo != config.to_dict():
        raise WeightsError(f"weight file was written for config {echo}")
    return ModelWeights.from_tensors(tensors, config)


_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path):
    """Read an 8-bit binary PPM (P6) into an (H, W, 3) uint8 array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from None
    fields, pos = [], 0
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ImageError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageError(f"expected P6 magic, got {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageError("non-numeric PPM header field") from None
    if not 0 < maxval <= 255:
        raise ImageError(f"only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    if len(data) - pos < need:
        raise ImageError("truncated PPM pixel data")
    return np.frombuffer(data, np.uint8, need, pos).reshape(height, width, 3).copy()


def ppm_bytes(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageError(f"expected (H, W, 3) uint8, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def write_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))


def normalize_image(pixels, mean, std):
    """uint8 (H, W, C) -> float32 ``(v / 255 - mean) / std`` per channel."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    return ((x - np.asarray(mean)) / np.asarray(std)).astype(np.float32)
