"""File formats: PFM, Middlebury .flo, binary PPM/PGM, canonical JSON text,
and color visualizations of flow and depth.

Float maps are numpy arrays of shape ``(H, W)`` or ``(H, W, C)`` with the
top image row first. All binary writers use explicit little-endian
encodings and write every NaN as the quiet NaN ``0x7FC00000`` so files are
byte-reproducible.
"""
from __future__ import annotations

import json
import math
import os
import re

import numpy as np

FLO_MAGIC = 202021.25
CANONICAL_NAN = np.uint32(0x7FC00000)


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _as_f32_canonical(data) -> np.ndarray:
    out = np.array(data, dtype=np.float32, copy=True)
    bits = out.view(np.uint32)
    bits[np.isnan(out)] = CANONICAL_NAN
    return out


def _channels(data: np.ndarray) -> int:
    return 1 if data.ndim == 2 else data.shape[2]


# -- PFM ---------------------------------------------------------------------

def encode_pfm(data) -> bytes:
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim not in (2, 3) or _channels(data) not in (1, 3):
        raise FormatError(f"PFM supports 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    header = b"Pf\n" if data.ndim == 2 else b"PF\n"
    header += f"{w} {h}\n-1.0\n".encode("ascii")
    # PFM stores the bottom row first.
    body = _as_f32_canonical(data)[::-1].astype("<f4").tobytes()
    return header + body


def write_pfm(path, data) -> None:
    with open(path, "wb") as f:
        f.write(encode_pfm(data))


def decode_pfm(raw: bytes) -> np.ndarray:
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise FormatError("malformed PFM header")
    color = m.group(1) == b"PF"
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError("malformed PFM scale") from None
    if scale == 0.0:
        raise FormatError("PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    c = 3 if color else 1
    body = raw[m.end():]
    if len(body) != w * h * c * 4:
        raise FormatError(f"PFM payload has {len(body)} bytes, expected {w * h * c * 4}")
    data = np.frombuffer(body, dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if color else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1])


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pfm(f.read())


# -- Middlebury .flo -----------------------------------------------------------

def encode_flo(flow) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f".flo needs an (H, W, 2) array, got {flow.shape}")
    h, w = flow.shape[:2]
    header = np.array([FLO_MAGIC], "<f4").tobytes() + np.array([w, h], "<i4").tobytes()
    return header + _as_f32_canonical(flow).astype("<f4").tobytes()


def write_flo(path, flow) -> None:
    with open(path, "wb") as f:
        f.write(encode_flo(flow))


def decode_flo(raw: bytes) -> np.ndarray:
    if len(raw) < 12:
        raise FormatError("truncated .flo header")
    magic = np.frombuffer(raw[:4], "<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(raw[4:12], "<i4"))
    if w < 0 or h < 0 or len(raw) - 12 != w * h * 8:
        raise FormatError(".flo size does not match its header")
    return np.frombuffer(raw[12:], "<f4").astype(np.float32).reshape(h, w, 2)


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_flo(f.read())


# -- PPM / PGM -----------------------------------------------------------------

def to_bytes_255(values) -> np.ndarray:
    """Map [0, 1] to 0..255 rounding half up; values are clamped first."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes_255(image).tobytes()


def write_ppm(path, image) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def encode_pgm(mask) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"PGM needs an (H, W) mask, got {mask.shape}")
    h, w = mask.shape
    body = np.where(mask != 0, 255, 0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + body.tobytes()


def write_pgm(path, mask) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(mask))


def _decode_pnm(raw: bytes, magic: bytes, channels: int) -> np.ndarray:
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or m.group(1) != magic:
        raise FormatError(f"expected a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    body = raw[m.end():]
    if len(body) != w * h * channels:
        raise FormatError("image payload size does not match header")
    arr = np.frombuffer(body, np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _decode_pnm(f.read(), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a P5 mask as a boolean array (non-zero is True)."""
    with open(path, "rb") as f:
        return _decode_pnm(f.read(), b"P5", 1) != 0


# -- colour coding ---------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    """Vectorized HSV to RGB with ``h`` in [0, 1)."""
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def flow_to_color(flow, max_magnitude: float) -> np.ndarray:
    """Color-code a 2-channel flow field.

    Hue follows the flow angle, saturation grows with ``|flow| / max_magnitude``
    (capped at 1) and value stays 1, so zero flow is white. NaN pixels are
    black.
    """
    if not max_magnitude > 0:
        raise ValueError("max_magnitude must be positive")
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    bad = ~(np.isfinite(u) & np.isfinite(v))
    u = np.where(bad, 0.0, u)
    v = np.where(bad, 0.0, v)
    hue = (np.arctan2(v, u) / (2.0 * math.pi)) % 1.0
    sat = np.minimum(1.0, np.hypot(u, v) / max_magnitude)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    rgb[bad] = 0.0
    return rgb


def depth_to_color(depth, max_value: float | None = None) -> np.ndarray:
    """Grayscale inverse-depth rendering: near is bright, invalid is black."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    inv = np.zeros_like(depth)
    inv[valid] = 1.0 / depth[valid]
    top = (1.0 / max_value) if max_value else (inv.max() if valid.any() else 1.0)
    g = np.clip(inv / top, 0.0, 1.0) if top > 0 else inv
    return np.repeat(g[..., None], 3, axis=-1)


def vector_to_color(vectors, max_magnitude: float) -> np.ndarray:
    """Map 3-vectors to RGB around mid-gray; NaN pixels are black."""
    vectors = np.asarray(vectors, dtype=np.float64)
    bad = ~np.all(np.isfinite(vectors), axis=-1)
    rgb = np.clip(0.5 + 0.5 * vectors / max_magnitude, 0.0, 1.0)
    rgb[bad] = 0.0
    return rgb


# -- canonical JSON text -----------------------------------------------------------

def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite number {x!r} cannot be serialized")
    return "%.9g" % (x + 0.0)


def _encode(value, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if value is None:
        return "null"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in value):
            return "[" + ", ".join(_encode(v, indent, level) for v in value) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in value]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            pad + json.dumps(str(k), ensure_ascii=False) + ": " + _encode(value[k], indent, level + 1)
            for k in sorted(value)
        ]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_canonical(value, indent: int = 1) -> str:
    """Deterministic JSON text: sorted keys, ``%.9g`` floats, flat numeric arrays
    on one line, trailing newline."""
    return _encode(value, indent, 0) + "\n"


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)
