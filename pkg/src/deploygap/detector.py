"""Detector adapters, reference detector training and checkpoint I/O.

A detector maps a batch of ``(B, 3, H, W)`` images in [0, 1] to the
probability that each image is synthetic. Pixel-space detectors are
differentiable end to end so attacks can backpropagate through them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import nn

from .dataset import Manifest, load_image
from .errors import AlignmentError, InsufficientData, NonConvergence, ShapeMismatch
from .transforms import TransformDistribution, apply, sample_transform

META_NAME = "meta.json"
PARAMS_NAME = "params.pt"
MIN_TRAIN_ACCURACY = 0.8


def config_hash(obj: Any) -> str:
    """sha256 of the canonical (sorted-key, compact) JSON encoding."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Detector(nn.Module):
    identifier: str = "detector"
    differentiable: bool = True
    input_size: int | None = None

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def _check(self, x: torch.Tensor) -> None:
        if self.input_size is not None and tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            raise ShapeMismatch(f"{self.identifier} expects {self.input_size}x{self.input_size} "
                                f"inputs, got {tuple(x.shape[-2:])}")

    @torch.no_grad()
    def score(self, batch: Sequence[torch.Tensor] | torch.Tensor) -> list[float]:
        """Probabilities of the synthetic class, one per image."""
        if isinstance(batch, torch.Tensor):
            x = batch if batch.dim() == 4 else batch.unsqueeze(0)
        else:
            x = torch.stack(list(batch))
        self._check(x)
        self.eval()
        return [float(p) for p in self(x.to(torch.float32))]


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


def _block(c_in: int, c_out: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=norm == "none"),
        _norm(norm, c_out),
        nn.ReLU(inplace=True),
    )


class ToyCNN(Detector):
    """Four stride-2 conv blocks, global average pool, linear logit."""

    arch = "toycnn"

    def __init__(self, input_size: int = 224, channels: Sequence[int] = (16, 32, 64, 64),
                 norm: str = "batch", identifier: str = "toycnn"):
        super().__init__()
        self.identifier = identifier
        self.input_size = input_size
        chans = [3, *channels]
        self.features = nn.Sequential(*[_block(a, b, norm) for a, b in zip(chans[:-1], chans[1:])])
        self.head = nn.Linear(chans[-1], 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        h = self.features(x - 0.5)
        return self.head(h.mean(dim=(-2, -1))).squeeze(-1)


class ResNet18Detector(Detector):
    """torchvision ResNet-18 with a single-logit head, trained from scratch."""

    arch = "resnet18"

    def __init__(self, input_size: int = 224, identifier: str = "resnet18"):
        super().__init__()
        from torchvision.models import resnet18

        self.identifier = identifier
        self.input_size = input_size
        self.net = resnet18(weights=None, num_classes=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.net(x - 0.5).squeeze(-1)


class LinearProbeDetector(Detector):
    """Logistic head over fixed embeddings.

    Without ``embed_fn`` the inputs *are* embedding vectors, so the adapter is
    usable for clean scoring only. Supplying a differentiable pixel-to-embedding
    function makes it attackable.
    """

    arch = "linear_probe"

    def __init__(self, dim: int, embed_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
                 identifier: str = "linear_probe"):
        super().__init__()
        self.identifier = identifier
        self.linear = nn.Linear(dim, 1)
        self.embed_fn = embed_fn
        self.differentiable = embed_fn is not None

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        z = self.embed_fn(x) if self.embed_fn is not None else x
        return self.linear(z).squeeze(-1)

    @torch.no_grad()
    def score(self, batch) -> list[float]:
        if isinstance(batch, torch.Tensor):
            x = batch
        else:
            x = torch.stack([torch.as_tensor(b) for b in batch])
        if self.embed_fn is None and x.dim() == 1:
            x = x.unsqueeze(0)
        self.eval()
        return [float(p) for p in self(x.to(torch.float32))]


ARCHS: dict[str, type[Detector]] = {"toycnn": ToyCNN, "resnet18": ResNet18Detector}


def build_detector(arch: str, input_size: int = 224, **kwargs) -> Detector:
    try:
        return ARCHS[arch](input_size=input_size, **kwargs)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHS)}") from None


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class DetectorCheckpoint:
    identifier: str
    arch: str
    state_dict: dict[str, torch.Tensor]
    config: dict[str, Any]
    train_metrics: dict[str, Any] = field(default_factory=dict)
    input_size: int | None = 224
    dim: int | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def adapter(self, embed_fn=None) -> Detector:
        if self.arch == "linear_probe":
            det: Detector = LinearProbeDetector(int(self.dim), embed_fn, self.identifier)
        else:
            extra = {"norm": self.config["norm"]} if self.arch == "toycnn" and "norm" in self.config else {}
            det = build_detector(self.arch, int(self.input_size), identifier=self.identifier, **extra)
        det.load_state_dict(self.state_dict)
        det.eval()
        for p in det.parameters():
            p.requires_grad_(False)
        return det

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "identifier": self.identifier,
            "arch": self.arch,
            "config": self.config,
            "config_hash": self.config_hash,
            "train_metrics": self.train_metrics,
            "input_size": self.input_size,
            "dim": self.dim,
            "params": PARAMS_NAME,
        }
        (directory / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        torch.save(self.state_dict, directory / PARAMS_NAME)
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "DetectorCheckpoint":
        directory = Path(directory)
        meta = json.loads((directory / META_NAME).read_text(encoding="utf-8"))
        state = torch.load(directory / meta.get("params", PARAMS_NAME), map_location="cpu", weights_only=True)
        return cls(meta["identifier"], meta["arch"], state, meta["config"], meta.get("train_metrics", {}),
                   meta.get("input_size"), meta.get("dim"))


def load_detector(directory: str | Path) -> Detector:
    return DetectorCheckpoint.load(directory).adapter()


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    arch: str = "toycnn"
    norm: str = "batch"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    # Train on randomly transformed copies so the detector survives platform
    # processing. Draws use their own seed stream.
    augment: bool = True
    augment_seed_offset: int = 7_000_000

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def _set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((probs >= 0.5) == (labels == 1)))


@torch.no_grad()
def recalibrate_batchnorm(model: nn.Module, x: torch.Tensor, batch_size: int) -> None:
    """Replace BatchNorm running statistics with exact train-set statistics.

    Running averages collected during a few dozen optimizer steps lag the final
    weights badly; one clean pass with cumulative averaging fixes that.
    """
    bns = [mod for mod in model.modules() if isinstance(mod, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
    model.train()
    for start in range(0, len(x), batch_size):
        model(x[start:start + batch_size])
    for bn, mom in zip(bns, saved):
        bn.momentum = mom
    model.eval()


def train_cnn_detector(m: Manifest, cfg: TrainConfig | None = None,
                       augment_dist: TransformDistribution | None = None) -> DetectorCheckpoint:
    """Train a pixel-space detector on the manifest's train split."""
    cfg = cfg or TrainConfig()
    train = m.split("train")
    labels = np.array([1.0 if r.label == "synthetic" else 0.0 for r in train])
    if len(train) < 2 or labels.min() == labels.max():
        raise InsufficientData("train split needs at least one real and one synthetic image")

    x_all = torch.stack([load_image(r, m.image_size, m.root) for r in train])
    y_all = torch.from_numpy(labels).to(torch.float32)
    _set_seed(cfg.seed)
    extra = {"norm": cfg.norm} if cfg.arch == "toycnn" else {}
    model = build_detector(cfg.arch, m.image_size, **extra)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    order_rng = np.random.default_rng([cfg.seed, 1])
    aug = (augment_dist or TransformDistribution()).with_seed(cfg.seed + cfg.augment_seed_offset)

    loss_trace: list[float] = []
    draw = 0
    for _ in range(cfg.epochs):
        model.train()
        perm = order_rng.permutation(len(train))
        for start in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[start:start + cfg.batch_size])
            xb, yb = x_all[idx], y_all[idx]
            if cfg.augment:
                views = []
                for img in xb:
                    views.append(apply(sample_transform(aug, draw), img))
                    draw += 1
                xb = torch.stack(views)
            opt.zero_grad()
            loss = loss_fn(model.logits(xb), yb)
            loss.backward()
            opt.step()
            loss_trace.append(float(loss.detach()))

    recalibrate_batchnorm(model, x_all, cfg.batch_size)
    model.eval()
    probs = np.array(model.score(x_all))
    acc = _accuracy(probs, labels)
    ckpt = DetectorCheckpoint(
        identifier=f"{cfg.arch}-s{cfg.seed}",
        arch=cfg.arch,
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=cfg.to_json(),
        train_metrics={"train_accuracy": acc, "loss_trace": loss_trace, "n_train": len(train)},
        input_size=m.image_size,
    )
    if acc < MIN_TRAIN_ACCURACY:
        raise NonConvergence(f"final train accuracy {acc:.3f} < {MIN_TRAIN_ACCURACY}",
                             loss_trace, acc, ckpt)
    return ckpt


@dataclass
class ProbeConfig:
    epochs: int = 500
    lr: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 0

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    paths, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            paths.append(obj["image_path"])
            rows.append(obj["embedding"])
    if not rows:
        raise InsufficientData(f"{path} holds no embeddings")
    return paths, np.asarray(rows, dtype=np.float32)


def write_embeddings(path: str | Path, image_paths: Sequence[str], embeddings: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p, e in zip(image_paths, np.asarray(embeddings)):
            fh.write(json.dumps({"embedding": [float(v) for v in e], "image_path": p}, sort_keys=True) + "\n")


def align_embeddings(m: Manifest, paths: Sequence[str], emb: np.ndarray) -> np.ndarray:
    if len(paths) != len(m.records):
        raise AlignmentError(f"{len(paths)} embedding rows for {len(m.records)} manifest records")
    for i, (p, r) in enumerate(zip(paths, m.records)):
        if p != r.image_path:
            raise AlignmentError(f"row {i}: embedding for {p!r} but manifest has {r.image_path!r}")
    return emb


def train_linear_probe(embeddings_file: str | Path, m: Manifest,
                       cfg: ProbeConfig | None = None) -> DetectorCheckpoint:
    """Fit a logistic head on frozen embeddings of the train split."""
    cfg = cfg or ProbeConfig()
    paths, emb = read_embeddings(embeddings_file)
    emb = align_embeddings(m, paths, emb)
    train_idx = [i for i, r in enumerate(m.records) if r.split == "train"]
    labels = np.array([1.0 if m.records[i].label == "synthetic" else 0.0 for i in train_idx])
    if len(train_idx) < 2 or labels.min() == labels.max():
        raise InsufficientData("train split needs at least one real and one synthetic record")

    x = torch.from_numpy(emb[train_idx])
    y = torch.from_numpy(labels).to(torch.float32)
    _set_seed(cfg.seed)
    probe = LinearProbeDetector(emb.shape[1])
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    loss_trace = []
    for _ in range(cfg.epochs):
        opt.zero_grad()
        loss = loss_fn(probe.logits(x), y)
        loss.backward()
        opt.step()
        loss_trace.append(float(loss.detach()))

    acc = _accuracy(np.array(probe.score(x)), labels)
    ckpt = DetectorCheckpoint(
        identifier=f"linear_probe-s{cfg.seed}",
        arch="linear_probe",
        state_dict={k: v.detach().clone() for k, v in probe.state_dict().items()},
        config=cfg.to_json(),
        train_metrics={"train_accuracy": acc, "loss_trace": loss_trace, "n_train": len(train_idx)},
        input_size=None,
        dim=int(emb.shape[1]),
    )
    if acc < MIN_TRAIN_ACCURACY:
        raise NonConvergence(f"final train accuracy {acc:.3f} < {MIN_TRAIN_ACCURACY}", loss_trace, acc, ckpt)
    return ckpt
