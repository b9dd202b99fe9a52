"""Band masks, L-inf/band projection and perturbation artifact storage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .dataset import EPOCH_TIMESTAMP
from .errors import DegenerateBand, MalformedArtifact, ShapeMismatch

DEFAULT_EPSILON = 16 / 255
DEFAULT_FRACTION = 0.22
REGIMES = ("per_image", "universal")
SIDES = ("top", "bottom")
META_NAME = "meta.json"
DELTA_NAME = "delta.f32"
EPS_SLACK = 1e-9


@dataclass(frozen=True)
class BandMask:
    side: str
    fraction: float
    height: int
    width: int
    rows: int

    @property
    def row_range(self) -> range:
        if self.side == "top":
            return range(0, self.rows)
        return range(self.height - self.rows, self.height)

    def array(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        r = self.row_range
        m[r.start:r.stop, :] = True
        return m

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.array())

    def to_json(self) -> dict[str, Any]:
        return {"side": self.side, "fraction": self.fraction, "height": self.height,
                "width": self.width, "rows": self.rows}


def build_band_mask(height: int, width: int, side: str = "bottom",
                    fraction: float = DEFAULT_FRACTION) -> BandMask:
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    if height < 8 or width < 8:
        raise ValueError(f"mask must be at least 8x8, got {height}x{width}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rows = math.floor(fraction * height)
    if rows == 0:
        raise DegenerateBand(f"fraction {fraction} of {height} rows rounds down to 0")
    return BandMask(side, float(fraction), int(height), int(width), rows)


def epsilon_bound(epsilon: float, dtype: torch.dtype = torch.float32) -> float:
    """Largest value representable in ``dtype`` that does not exceed ``epsilon``."""
    if dtype == torch.float64:
        return float(epsilon)
    e = np.float32(epsilon)
    if float(e) > epsilon:
        e = np.nextafter(e, np.float32(0.0))
    return float(e)


def project(delta: torch.Tensor, mask: BandMask, epsilon: float) -> torch.Tensor:
    """Clamp to the L-inf ball then zero everything outside the band."""
    if tuple(delta.shape[-2:]) != (mask.height, mask.width) or delta.shape[-3] != 3:
        raise ShapeMismatch(f"delta shape {tuple(delta.shape)} does not fit mask "
                            f"{mask.height}x{mask.width}")
    b = epsilon_bound(epsilon, delta.dtype)
    clamped = delta.clamp(-b, b)
    return torch.where(mask.tensor(), clamped, torch.zeros((), dtype=delta.dtype))


@dataclass(frozen=True)
class PerturbationArtifact:
    delta: np.ndarray  # float32, 3xHxW
    mask: BandMask
    epsilon: float = DEFAULT_EPSILON
    regime: str = "per_image"
    source_image_id: str | None = None
    config_hash: str = ""
    created: str = EPOCH_TIMESTAMP

    def delta_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.delta, dtype=np.float32))

    def meta(self) -> dict[str, Any]:
        return {
            "mask": self.mask.to_json(),
            "epsilon": self.epsilon,
            "regime": self.regime,
            "source_image_id": self.source_image_id,
            "config_hash": self.config_hash,
            "created": self.created,
            "shape": list(self.delta.shape),
            "dtype": "f32le",
            "layout": "CHW",
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PerturbationArtifact):
            return NotImplemented
        return (self.meta() == other.meta()
                and self.delta.dtype == other.delta.dtype
                and self.delta.tobytes() == other.delta.tobytes())

    __hash__ = None  # type: ignore[assignment]


def check_artifact(a: PerturbationArtifact) -> None:
    """Raise MalformedArtifact naming the first violated invariant."""
    m = a.mask
    if a.regime not in REGIMES:
        raise MalformedArtifact(f"unknown regime {a.regime!r}", "regime")
    if a.regime == "universal" and a.source_image_id is not None:
        raise MalformedArtifact("universal artifact must have null source_image_id", "source_image_id")
    if a.regime == "per_image" and a.source_image_id is None:
        raise MalformedArtifact("per-image artifact needs a source_image_id", "source_image_id")
    if m.side not in SIDES or m.rows != math.floor(m.fraction * m.height) or m.rows < 1:
        raise MalformedArtifact("band rows inconsistent with fraction and height", "mask")
    if a.delta.shape != (3, m.height, m.width):
        raise MalformedArtifact(f"shape {a.delta.shape} does not match mask", "delta")
    if not np.isfinite(a.delta).all():
        raise MalformedArtifact("delta contains non-finite values", "delta")
    if a.epsilon < 0:
        raise MalformedArtifact("epsilon must be non-negative", "epsilon")
    peak = float(np.abs(a.delta).max(initial=0.0))
    if peak > a.epsilon + EPS_SLACK:
        raise MalformedArtifact(f"max |delta| = {peak!r} exceeds epsilon {a.epsilon!r}", "epsilon")
    if np.any(a.delta[:, ~m.array()] != 0):
        raise MalformedArtifact("delta is nonzero outside the band", "mask")


def make_artifact(delta: torch.Tensor | np.ndarray, mask: BandMask, epsilon: float, regime: str,
                  source_image_id: str | None, config_hash: str,
                  created: str = EPOCH_TIMESTAMP) -> PerturbationArtifact:
    if isinstance(delta, torch.Tensor):
        delta = delta.detach().cpu().numpy()
    arr = np.ascontiguousarray(delta, dtype=np.float32)
    a = PerturbationArtifact(arr, mask, float(epsilon), regime, source_image_id, config_hash, created)
    check_artifact(a)
    return a


def apply_perturbation(x: torch.Tensor, a: PerturbationArtifact) -> torch.Tensor:
    d = a.delta_tensor().to(x.dtype)
    if tuple(x.shape[-3:]) != tuple(d.shape):
        raise ShapeMismatch(f"image {tuple(x.shape)} vs delta {tuple(d.shape)}")
    return (x + d).clamp(0.0, 1.0)


def save_artifact(a: PerturbationArtifact, directory: str | Path) -> Path:
    check_artifact(a)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / META_NAME).write_text(json.dumps(a.meta(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    (directory / DELTA_NAME).write_bytes(a.delta.astype("<f4").tobytes(order="C"))
    return directory


def load_artifact(directory: str | Path) -> PerturbationArtifact:
    directory = Path(directory)
    try:
        meta = json.loads((directory / META_NAME).read_text(encoding="utf-8"))
        raw = (directory / DELTA_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise MalformedArtifact(f"missing file {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedArtifact(f"meta.json is not valid JSON: {exc}", "meta") from exc

    for key in ("mask", "epsilon", "regime", "source_image_id", "config_hash", "shape"):
        if key not in meta:
            raise MalformedArtifact("missing", key)
    if meta.get("dtype", "f32le") != "f32le" or meta.get("layout", "CHW") != "CHW":
        raise MalformedArtifact("only f32le CHW deltas are supported", "dtype")
    try:
        mk = meta["mask"]
        mask = BandMask(mk["side"], float(mk["fraction"]), int(mk["height"]), int(mk["width"]), int(mk["rows"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedArtifact(f"bad mask record: {exc}", "mask") from exc
    shape = tuple(int(s) for s in meta["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise MalformedArtifact(f"{len(raw)} bytes do not match shape {shape}", "delta")
    delta = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    a = PerturbationArtifact(delta, mask, float(meta["epsilon"]), meta["regime"], meta["source_image_id"],
                             str(meta["config_hash"]), str(meta.get("created", EPOCH_TIMESTAMP)))
    check_artifact(a)
    return a
