"""Image catalogs: manifest I/O, validation, image loading and the toy generator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import DataError, DecodeError, MalformedManifest, MissingImage
from .transforms import bilinear_resize

LABELS = ("real", "synthetic")
SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.json"
# Fixed so regenerated datasets are byte-identical.
EPOCH_TIMESTAMP = "1970-01-01T00:00:00+00:00"

SIGNATURE_AMPLITUDE = 0.05
SIGNATURE_PERIOD = 8
TEST_FRACTION = 0.3


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: str
    prompt_id: str | None = None
    seed: int | None = None
    split: str = "train"

    @property
    def sample_id(self) -> str:
        return self.image_path


@dataclass
class Manifest:
    records: list[SampleRecord]
    image_size: int = 224
    name: str = "manifest"
    created: str = EPOCH_TIMESTAMP
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, rec: SampleRecord) -> Path:
        return self.root / rec.image_path

    def split(self, split: str, label: str | None = None) -> list[SampleRecord]:
        return [
            r for r in self.records
            if r.split == split and (label is None or r.label == label)
        ]

    @property
    def prompt_ids(self) -> list[str]:
        return sorted({r.prompt_id for r in self.records if r.prompt_id is not None})

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "image_size": self.image_size,
            "created": self.created,
            "records": [asdict(r) for r in self.records],
        }


@dataclass(frozen=True)
class Violation:
    indices: tuple[int, ...]
    invariant: str
    message: str

    def __str__(self) -> str:
        where = ",".join(str(i) for i in self.indices) if self.indices else "-"
        return f"[{self.invariant}] records {where}: {self.message}"


def _record_from_json(obj: Any, index: int) -> SampleRecord:
    if not isinstance(obj, dict):
        raise MalformedManifest("record is not an object", index)
    missing = {"image_path", "label", "prompt_id", "seed", "split"} - obj.keys()
    if missing:
        raise MalformedManifest(f"missing fields {sorted(missing)}", index)
    if not isinstance(obj["image_path"], str) or not obj["image_path"]:
        raise MalformedManifest("image_path must be a non-empty string", index)
    if obj["label"] not in LABELS:
        raise MalformedManifest(f"label must be one of {LABELS}", index)
    if obj["split"] not in SPLITS:
        raise MalformedManifest(f"split must be one of {SPLITS}", index)
    if obj["prompt_id"] is not None and not isinstance(obj["prompt_id"], str):
        raise MalformedManifest("prompt_id must be a string or null", index)
    seed = obj["seed"]
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise MalformedManifest("seed must be an integer or null", index)
    return SampleRecord(obj["image_path"], obj["label"], obj["prompt_id"], seed, obj["split"])


def validate_manifest(m: Manifest, check_files: bool = False) -> list[Violation]:
    """Return every invariant violation in ``m``; an empty list means valid."""
    out: list[Violation] = []
    first_seen: dict[str, int] = {}
    for i, r in enumerate(m.records):
        if r.label not in LABELS:
            out.append(Violation((i,), "label", f"unknown label {r.label!r}"))
        if r.split not in SPLITS:
            out.append(Violation((i,), "split", f"unknown split {r.split!r}"))
        if r.label == "real" and r.prompt_id is not None:
            out.append(Violation((i,), "real_prompt_null", "real record carries a prompt_id"))
        if r.label == "synthetic" and r.prompt_id is None:
            out.append(Violation((i,), "synthetic_prompt_set", "synthetic record has null prompt_id"))
        if r.image_path in first_seen:
            out.append(Violation((first_seen[r.image_path], i), "unique_path",
                                 f"duplicate image_path {r.image_path!r}"))
        else:
            first_seen[r.image_path] = i
        if check_files and not m.resolve(r).is_file():
            out.append(Violation((i,), "image_exists", f"{r.image_path} does not exist"))

    for split in SPLITS:
        for label in LABELS:
            if not any(r.split == split and r.label == label for r in m.records):
                out.append(Violation((), "split_has_both_labels", f"split {split!r} has no {label} record"))

    covered = {r.prompt_id for r in m.records if r.split == "test" and r.label == "synthetic"}
    for p in m.prompt_ids:
        if p not in covered:
            idx = tuple(i for i, r in enumerate(m.records) if r.prompt_id == p)
            out.append(Violation(idx, "test_prompt_coverage",
                                 f"prompt_id {p!r} has no synthetic test record"))
    return out


def read_manifest(path: str | Path) -> Manifest:
    """Parse a manifest file without checking cross-record invariants."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no manifest at {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise MalformedManifest("top level must be an object with a 'records' list")
    size = doc.get("image_size", 224)
    if isinstance(size, bool) or not isinstance(size, int) or size < 8:
        raise MalformedManifest("image_size must be an integer >= 8")
    records = [_record_from_json(obj, i) for i, obj in enumerate(doc["records"])]
    return Manifest(records, size, str(doc.get("name", path.parent.name)),
                    str(doc.get("created", EPOCH_TIMESTAMP)), path.parent)


def load_manifest(path: str | Path) -> Manifest:
    """Parse and fully validate a manifest; raises on the first problem."""
    m = read_manifest(path)
    for i, r in enumerate(m.records):
        if not m.resolve(r).is_file():
            raise MissingImage(f"record {i}: {r.image_path} does not exist under {m.root}")
    violations = validate_manifest(m)
    if violations:
        v = violations[0]
        raise MalformedManifest(f"[{v.invariant}] {v.message}", v.indices[0] if v.indices else None)
    return m


def save_manifest(m: Manifest, path: str | Path) -> Path:
    path = Path(path)
    if path.is_dir() or path.suffix != ".json":
        path = path / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_image_file(path: str | Path, size: int | None = None) -> torch.Tensor:
    """Decode an 8-bit RGB file into a float32 3xHxW tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingImage(f"{path} does not exist")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    x = torch.from_numpy(arr.transpose(2, 0, 1).copy()).to(torch.float32) / 255.0
    if size is not None and x.shape[1:] != (size, size):
        x = bilinear_resize(x, size, size).clamp(0.0, 1.0)
    return x


def load_image(rec: SampleRecord, size: int, root: str | Path = ".") -> torch.Tensor:
    return read_image_file(Path(root) / rec.image_path, size)


def save_image(x: torch.Tensor | np.ndarray, path: str | Path) -> None:
    """Quantize a [0, 1] 3xHxW image to 8 bits and write it as PNG."""
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    q = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG", optimize=False)


def fake_signature(size: int) -> np.ndarray:
    """Fixed-phase sinusoidal grid shared by every toy synthetic image."""
    t = 2.0 * math.pi * (np.arange(size) + 0.5) / SIGNATURE_PERIOD
    grid = np.outer(np.sin(t), np.sin(t))
    return SIGNATURE_AMPLITUDE * grid[None, :, :]


def smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-pass random colour texture with values roughly in [0.1, 0.9]."""
    sigma = rng.uniform(3.0, 8.0)
    noise = rng.standard_normal((3, size, size))
    tex = np.stack([gaussian_filter(c, sigma, mode="wrap") for c in noise])
    tex /= tex.std() + 1e-12
    base = rng.uniform(0.3, 0.7, size=(3, 1, 1))
    return np.clip(base + 0.12 * tex, 0.0, 1.0)


def _stratified_test_indices(n: int, rng: np.random.Generator) -> set[int]:
    n_test = max(1, int(round(TEST_FRACTION * n))) if n > 1 else 0
    return set(rng.permutation(n)[:n_test].tolist())


def generate_toy_dataset(out_dir: str | Path, n_per_class: int = 50, n_prompts: int = 5,
                         image_size: int = 224, seed: int = 0) -> Manifest:
    """Write a balanced real/synthetic PNG dataset plus its manifest.

    Synthetic images are smooth textures with a faint period-8 grid added; real
    images are the same kind of texture without it. Prompt ids ``toy_k`` are
    assigned round-robin to the synthetic images. The split is 70/30, stratified
    by label and by prompt.
    """
    if not n_per_class >= n_prompts >= 1:
        raise ValueError("need n_per_class >= n_prompts >= 1")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    signature = fake_signature(image_size)

    entries: list[tuple[str, str, str | None, int]] = []
    for label in LABELS:
        for i in range(n_per_class):
            img_seed = seed * 1_000_003 + (0 if label == "real" else n_per_class) + i
            rng = np.random.default_rng(img_seed)
            img = smooth_texture(rng, image_size)
            prompt = None
            if label == "synthetic":
                img = np.clip(img + signature, 0.0, 1.0)
                prompt = f"toy_{i % n_prompts}"
            rel = f"images/{label}_{i:04d}.png"
            save_image(img, out_dir / rel)
            entries.append((rel, label, prompt, img_seed))

    split_rng = np.random.default_rng([seed, 0x5EED])
    groups: dict[tuple[str, str | None], list[int]] = {}
    for k, (_, label, prompt, _) in enumerate(entries):
        groups.setdefault((label, prompt), []).append(k)
    test_set: set[int] = set()
    for key in sorted(groups, key=lambda g: (g[0], g[1] or "")):
        members = groups[key]
        test_set |= {members[j] for j in _stratified_test_indices(len(members), split_rng)}

    records = [
        SampleRecord(rel, label, prompt, s, "test" if k in test_set else "train")
        for k, (rel, label, prompt, s) in enumerate(entries)
    ]
    m = Manifest(records, image_size, f"toy-n{n_per_class}-p{n_prompts}-s{seed}", EPOCH_TIMESTAMP, out_dir)
    save_manifest(m, out_dir / MANIFEST_NAME)
    return m
