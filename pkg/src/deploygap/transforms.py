"""Differentiable platform transforms and the randomized transform sampler.

Every transform maps a ``(..., 3, H, W)`` tensor in [0, 1] to a tensor of the
same shape and stays differentiable with respect to its input. The only
non-smooth pieces are the output clamps and JPEG rounding; rounding uses a
straight-through estimator (exact round forward, identity backward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BadQuality, DegenerateScale

KINDS = ("identity", "resize", "jpeg", "screenshot")

# Standard reference quantization tables (luminance, chrominance).
BASE_LUMA_TABLE = (
    (16, 11, 10, 16, 24, 40, 51, 61),
    (12, 12, 14, 19, 26, 58, 60, 55),
    (14, 13, 16, 24, 40, 57, 69, 56),
    (14, 17, 22, 29, 51, 87, 80, 62),
    (18, 22, 37, 56, 68, 109, 103, 77),
    (24, 35, 55, 64, 81, 104, 113, 92),
    (49, 64, 78, 87, 103, 121, 120, 101),
    (72, 92, 95, 98, 112, 100, 103, 99),
)
BASE_CHROMA_TABLE = (
    (17, 18, 24, 47, 99, 99, 99, 99),
    (18, 21, 26, 66, 99, 99, 99, 99),
    (24, 26, 56, 99, 99, 99, 99, 99),
    (47, 66, 99, 99, 99, 99, 99, 99),
) + ((99,) * 8,) * 4

MIN_RESIZED = 8


# ----------------------------------------------------------------------------
# resampling


def _axis_plan(n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # Half-pixel centres, edge-clamped, no antialiasing.
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    return torch.from_numpy(i0), torch.from_numpy(i1), torch.from_numpy(lam)


def _resize_axis(x: torch.Tensor, n_out: int, dim: int) -> torch.Tensor:
    n_in = x.shape[dim]
    if n_in == n_out:
        return x
    i0, i1, lam = _axis_plan(n_in, n_out)
    shape = [1] * x.dim()
    shape[dim] = n_out
    w = lam.to(x.dtype).reshape(shape)
    # lerp keeps constant regions bit-exact
    return torch.lerp(x.index_select(dim, i0), x.index_select(dim, i1), w)


def bilinear_resize(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Separable bilinear resampling of the last two dimensions."""
    x = _resize_axis(x, height, x.dim() - 2)
    return _resize_axis(x, width, x.dim() - 1)


def resize_chain(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Downscale by ``scale`` and upscale back to the original size."""
    if not 0.0 < scale <= 1.0:
        raise DegenerateScale(f"scale must lie in (0, 1], got {scale}")
    h, w = x.shape[-2:]
    h2, w2 = math.floor(scale * h + 0.5), math.floor(scale * w + 0.5)
    if min(h2, w2) < MIN_RESIZED:
        raise DegenerateScale(f"scale {scale} shrinks {h}x{w} to {h2}x{w2}, below {MIN_RESIZED} px")
    if (h2, w2) == (h, w):
        return x.clamp(0.0, 1.0)
    small = bilinear_resize(x, h2, w2)
    return bilinear_resize(small, h, w).clamp(0.0, 1.0)


# ----------------------------------------------------------------------------
# JPEG


def quality_scale(quality: int) -> int:
    """Percent scaling applied to the base tables (libjpeg convention)."""
    if not 1 <= quality <= 100:
        raise BadQuality(f"quality must be in [1, 100], got {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quantization_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    s = quality_scale(quality)
    out = []
    for base in (BASE_LUMA_TABLE, BASE_CHROMA_TABLE):
        b = np.asarray(base, dtype=np.int64)
        out.append(np.clip((b * s + 50) // 100, 1, 255))
    return out[0], out[1]


def dct_matrix(n: int = 8, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Orthonormal type-II DCT matrix; row k is the k-th basis vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos((2 * i + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    m[0, :] = np.sqrt(1.0 / n)
    return torch.from_numpy(m).to(dtype)


def _to_blocks(x: torch.Tensor) -> torch.Tensor:
    *lead, h, w = x.shape
    return x.reshape(*lead, h // 8, 8, w // 8, 8).transpose(-3, -2)


def _from_blocks(b: torch.Tensor) -> torch.Tensor:
    *lead, nh, nw, _, _ = b.shape
    return b.transpose(-3, -2).reshape(*lead, nh * 8, nw * 8)


def block_dct(x: torch.Tensor) -> torch.Tensor:
    """8x8 blockwise DCT of the last two dims; returns (..., H/8, W/8, 8, 8)."""
    d = dct_matrix(8, x.dtype)
    return d @ _to_blocks(x) @ d.T


def block_idct(coeffs: torch.Tensor) -> torch.Tensor:
    d = dct_matrix(8, coeffs.dtype)
    return _from_blocks(d.T @ coeffs @ d)


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    """Full-range BT.601 on 0..255 values, channel dim -3."""
    r, g, b = x.unbind(-3)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return torch.stack((y, cb, cr), dim=-3)


def ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x.unbind(-3)
    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack((r, g, b), dim=-3)


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.round(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


def round_ste(x: torch.Tensor) -> torch.Tensor:
    return _RoundSTE.apply(x)


def jpeg_differentiable(x: torch.Tensor, quality: int, rounding: str = "ste") -> torch.Tensor:
    """JPEG compress/decompress round trip without chroma subsampling.

    ``rounding="none"`` skips quantization rounding altogether, leaving only the
    smooth part of the pipeline (useful for gradient checks).
    """
    if rounding not in ("ste", "none"):
        raise ValueError(f"unknown rounding mode {rounding!r}")
    luma, chroma = quantization_tables(quality)
    h, w = x.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        lead = x.shape[:-3]
        x4 = x.reshape(-1, *x.shape[-3:])
        x4 = F.pad(x4, (0, pw, 0, ph), mode="reflect")
        x = x4.reshape(*lead, *x4.shape[-3:])

    ycc = rgb_to_ycbcr(x * 255.0) - 128.0
    coeffs = block_dct(ycc)
    table = torch.from_numpy(np.stack([luma, chroma, chroma])).to(x.dtype)
    table = table[:, None, None, :, :]
    if rounding == "ste":
        coeffs = round_ste(coeffs / table) * table
    out = ycbcr_to_rgb(block_idct(coeffs) + 128.0) / 255.0
    return out[..., :h, :w].clamp(0.0, 1.0)


# ----------------------------------------------------------------------------
# screenshot composite


def screenshot_noise(shape: torch.Size | tuple[int, ...], seed: int, dtype: torch.dtype) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=g, dtype=torch.float64).to(dtype)


def screenshot_transform(x: torch.Tensor, scale: float, noise_std: float, quality: int,
                         noise_seed: int = 0, rounding: str = "ste") -> torch.Tensor:
    """Resize chain, additive Gaussian noise fixed by ``noise_seed``, then JPEG."""
    y = resize_chain(x, scale)
    if noise_std > 0:
        y = y + noise_std * screenshot_noise(y.shape, noise_seed, y.dtype)
    return jpeg_differentiable(y.clamp(0.0, 1.0), quality, rounding=rounding)


# ----------------------------------------------------------------------------
# sampling


DEFAULT_WEIGHTS = {"identity": 0.1, "resize": 0.3, "jpeg": 0.3, "screenshot": 0.3}
DEFAULT_RANGES: dict[str, dict[str, list[float]]] = {
    "resize": {"scale": [0.5, 1.0]},
    "jpeg": {"quality": [30, 95]},
    "screenshot": {"scale": [0.6, 0.9], "noise_std": [0.0, 0.02], "quality": [50, 90]},
}
_INTEGER_PARAMS = {"quality"}


@dataclass(frozen=True)
class TransformDraw:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return apply(self, x)

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass
class TransformDistribution:
    kind_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    ranges: dict[str, dict[str, list[float]]] = field(
        default_factory=lambda: {k: {p: list(v) for p, v in r.items()} for k, r in DEFAULT_RANGES.items()}
    )
    rng_seed: int = 0

    def __post_init__(self):
        unknown = set(self.kind_weights) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown kinds in kind_weights: {sorted(unknown)}")
        w = self.weights()
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"kind_weights must be non-negative and sum to 1, got {w.tolist()}")
        for kind, params in self.ranges.items():
            for name, (lo, hi) in params.items():
                if not lo <= hi:
                    raise ValueError(f"empty range for {kind}.{name}: [{lo}, {hi}]")

    def weights(self) -> np.ndarray:
        return np.array([float(self.kind_weights.get(k, 0.0)) for k in KINDS])

    def with_seed(self, seed: int) -> "TransformDistribution":
        return TransformDistribution(dict(self.kind_weights),
                                     {k: {p: list(v) for p, v in r.items()} for k, r in self.ranges.items()},
                                     int(seed))

    def to_json(self) -> dict[str, Any]:
        return {"kind_weights": dict(self.kind_weights), "ranges": self.ranges, "rng_seed": self.rng_seed}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TransformDistribution":
        ranges = {k: {p: list(v) for p, v in r.items()} for k, r in DEFAULT_RANGES.items()}
        for kind, params in (obj.get("ranges") or {}).items():
            ranges.setdefault(kind, {}).update({p: list(v) for p, v in params.items()})
        weights = obj.get("kind_weights") or DEFAULT_WEIGHTS
        return cls(dict(weights), ranges, int(obj.get("rng_seed", 0)))


def sample_transform(dist: TransformDistribution, draw_index: int) -> TransformDraw:
    """Draw ``draw_index`` of the stream keyed by ``dist.rng_seed``; stateless."""
    rng = np.random.default_rng([int(dist.rng_seed), int(draw_index)])
    kind = KINDS[int(rng.choice(len(KINDS), p=dist.weights()))]
    if kind == "identity":
        return TransformDraw("identity", {})
    params: dict[str, Any] = {}
    for name, (lo, hi) in dist.ranges[kind].items():
        if name in _INTEGER_PARAMS:
            params[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            params[name] = float(rng.uniform(lo, hi))
    if kind == "screenshot":
        params["noise_seed"] = int(rng.integers(0, 2**31 - 1))
    return TransformDraw(kind, params)


def apply(t: TransformDraw, x: torch.Tensor) -> torch.Tensor:
    if t.kind == "identity":
        return x
    p = t.params
    if t.kind == "resize":
        return resize_chain(x, p["scale"])
    if t.kind == "jpeg":
        return jpeg_differentiable(x, int(p["quality"]))
    return screenshot_transform(x, p["scale"], p["noise_std"], int(p["quality"]), int(p.get("noise_seed", 0)))
