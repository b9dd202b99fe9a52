"""Band-constrained PGD attacks with expectation over transformation.

Both regimes minimise the expected binary cross-entropy toward the *real*
label over randomly drawn platform transforms, taking signed-gradient steps
and projecting onto the band-restricted L-inf ball after every step.

Transform streams: attacks draw from the stream seeded ``cfg.seed +
ATTACK_STREAM_OFFSET`` and evaluation from ``seed + EVAL_STREAM_OFFSET``, so
held-out evaluation never reuses an optimisation draw.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Manifest, load_image
from .detector import Detector, config_hash
from .errors import InsufficientData, MissingArtifact, NonDifferentiableDetector
from .metrics import ScoreEntry, ScoreSet
from .perturb import (
    DEFAULT_EPSILON,
    DEFAULT_FRACTION,
    BandMask,
    PerturbationArtifact,
    apply_perturbation,
    build_band_mask,
    make_artifact,
    project,
)
from .transforms import TransformDistribution, apply, sample_transform

log = logging.getLogger(__name__)

ATTACK_STREAM_OFFSET = 0
EVAL_STREAM_OFFSET = 1_000_000
CONDITIONS = ("clean", "per_image", "universal")
EVAL_MODES = ("pristine", "deployment")


@dataclass
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    step_size: float | None = None  # None -> epsilon / 8
    iterations: int = 100
    eot_samples: int = 4
    band_side: str = "bottom"
    band_fraction: float = DEFAULT_FRACTION
    target: str = "real"
    transform_dist: TransformDistribution = field(default_factory=TransformDistribution)
    seed: int = 0
    universal_epochs: int = 5
    universal_batch_size: int = 16

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.epsilon / 8
        if self.epsilon < 0 or self.step_size < 0:
            raise ValueError("epsilon and step_size must be non-negative")
        if self.epsilon > 0 and self.step_size == 0:
            raise ValueError("step_size must be positive when epsilon > 0")
        if self.iterations < 1 or self.eot_samples < 1:
            raise ValueError("iterations and eot_samples must be >= 1")
        if self.universal_epochs < 1 or self.universal_batch_size < 1:
            raise ValueError("universal epochs and batch_size must be >= 1")
        if self.target != "real":
            raise ValueError("only the 'real' target is supported")

    def to_json(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "iterations": self.iterations,
            "eot_samples": self.eot_samples,
            "band_side": self.band_side,
            "band_fraction": self.band_fraction,
            "target": self.target,
            "transform_dist": self.transform_dist.to_json(),
            "seed": self.seed,
            "universal": {"epochs": self.universal_epochs, "batch_size": self.universal_batch_size},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "AttackConfig":
        obj = dict(obj)
        uni = obj.pop("universal", None) or {}
        dist = TransformDistribution.from_json(obj.pop("transform_dist", None) or {})
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in obj.items() if k in known}
        if "epochs" in uni:
            kwargs["universal_epochs"] = int(uni["epochs"])
        if "batch_size" in uni:
            kwargs["universal_batch_size"] = int(uni["batch_size"])
        return cls(transform_dist=dist, **kwargs)

    @property
    def hash(self) -> str:
        return config_hash(self.to_json())

    def attack_stream(self) -> TransformDistribution:
        return self.transform_dist.with_seed(self.seed + ATTACK_STREAM_OFFSET)


@dataclass
class AttackTrace:
    loss: list[float] = field(default_factory=list)
    target_prob: list[float] = field(default_factory=list)
    artifact_id: str | None = None

    @property
    def best_loss(self) -> list[float]:
        return np.minimum.accumulate(np.asarray(self.loss)).tolist() if self.loss else []

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def _require_differentiable(d: Detector) -> None:
    if not getattr(d, "differentiable", False):
        raise NonDifferentiableDetector(f"{getattr(d, 'identifier', d)!r} cannot backpropagate to pixels")


def _eot_step(images: torch.Tensor, delta: torch.Tensor, d: Detector, dist: TransformDistribution,
              first_draw: int, n_draws: int) -> tuple[torch.Tensor, float, float]:
    """Gradient of the mean EOT loss w.r.t. ``delta`` for a (B, 3, H, W) batch."""
    draws = [sample_transform(dist, first_draw + j) for j in range(n_draws)]
    delta = delta.detach().requires_grad_(True)
    adv = (images + delta).clamp(0.0, 1.0)
    views = torch.stack([apply(t, img) for img in adv for t in draws])
    logits = d.logits(views)
    # BCE toward the real label (0): -log(1 - sigmoid(z)) = softplus(z)
    loss = F.softplus(logits).mean()
    (grad,) = torch.autograd.grad(loss, delta)
    target_prob = float(torch.sigmoid(-logits.detach()).mean())
    return grad, float(loss.detach()), target_prob


def pgd_eot_per_image(x: torch.Tensor, d: Detector, cfg: AttackConfig,
                      source_image_id: str = "image") -> tuple[PerturbationArtifact, AttackTrace]:
    """Optimise one band perturbation for a single image."""
    _require_differentiable(d)
    mask = build_band_mask(x.shape[-2], x.shape[-1], cfg.band_side, cfg.band_fraction)
    dist = cfg.attack_stream()
    images = x.unsqueeze(0).to(torch.float32)
    delta = torch.zeros(x.shape, dtype=torch.float32)
    trace = AttackTrace()
    for k in range(cfg.iterations):
        grad, loss, prob = _eot_step(images, delta, d, dist, k * cfg.eot_samples, cfg.eot_samples)
        trace.loss.append(loss)
        trace.target_prob.append(prob)
        delta = project(delta - cfg.step_size * grad.sign(), mask, cfg.epsilon)
    artifact = make_artifact(delta, mask, cfg.epsilon, "per_image", source_image_id, cfg.hash)
    trace.artifact_id = source_image_id
    return artifact, trace


def universal_train(images: Sequence[torch.Tensor], d: Detector,
                    cfg: AttackConfig) -> tuple[PerturbationArtifact, AttackTrace]:
    """Optimise one band perturbation shared by every image.

    Each step uses one shuffled batch; the EOT draws of a step are shared by all
    images in that batch, so a one-image run with batch size 1 follows the
    per-image trajectory exactly.
    """
    _require_differentiable(d)
    if len(images) < 1:
        raise InsufficientData("universal training needs at least one image")
    stack = torch.stack(list(images)).to(torch.float32)
    n, _, h, w = stack.shape
    mask = build_band_mask(h, w, cfg.band_side, cfg.band_fraction)
    dist = cfg.attack_stream()
    bs = cfg.universal_batch_size
    delta = torch.zeros((3, h, w), dtype=torch.float32)
    trace = AttackTrace()
    step = 0
    for epoch in range(cfg.universal_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, bs):
            idx = torch.from_numpy(order[start:start + bs])
            grad, loss, prob = _eot_step(stack[idx], delta, d, dist, step * cfg.eot_samples, cfg.eot_samples)
            trace.loss.append(loss)
            trace.target_prob.append(prob)
            delta = project(delta - cfg.step_size * grad.sign(), mask, cfg.epsilon)
            step += 1
    artifact = make_artifact(delta, mask, cfg.epsilon, "universal", None, cfg.hash)
    trace.artifact_id = "universal"
    return artifact, trace


def attack_manifest(m: Manifest, d: Detector, cfg: AttackConfig,
                    workers: int = 1) -> dict[str, tuple[PerturbationArtifact, AttackTrace]]:
    """Per-image attacks on every synthetic test image, keyed by sample id."""
    records = m.split("test", "synthetic")

    def run(rec):
        x = load_image(rec, m.image_size, m.root)
        return rec.sample_id, pgd_eot_per_image(x, d, cfg, rec.sample_id)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, records))
    else:
        results = [run(r) for r in records]
    return dict(results)


def universal_manifest(m: Manifest, d: Detector, cfg: AttackConfig) -> tuple[PerturbationArtifact, AttackTrace]:
    """Universal attack trained on the synthetic train split."""
    records = m.split("train", "synthetic")
    images = [load_image(r, m.image_size, m.root) for r in records]
    return universal_train(images, d, cfg)


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class EvalConfig:
    eval_mode: str = "deployment"
    n_draws: int = 8
    seed: int = 0
    transform_dist: TransformDistribution = field(default_factory=TransformDistribution)
    # "heldout" draws are disjoint from attack draws; "attack" replays the attack stream.
    stream: str = "heldout"

    def __post_init__(self):
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        if self.stream not in ("heldout", "attack"):
            raise ValueError("stream must be 'heldout' or 'attack'")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")

    def draw_stream(self) -> TransformDistribution:
        offset = EVAL_STREAM_OFFSET if self.stream == "heldout" else ATTACK_STREAM_OFFSET
        return self.transform_dist.with_seed(self.seed + offset)

    def to_json(self) -> dict[str, Any]:
        return {"eval_mode": self.eval_mode, "n_draws": self.n_draws, "seed": self.seed,
                "transform_dist": self.transform_dist.to_json(), "stream": self.stream}


def _deployment_score(d: Detector, x: torch.Tensor, dist: TransformDistribution, n_draws: int) -> float:
    # Scored one view at a time: per-sample results must not depend on batch size.
    total = 0.0
    for j in range(n_draws):
        total += d.score(apply(sample_transform(dist, j), x))[0]
    return total / n_draws


def evaluate_condition(m: Manifest, d: Detector, condition: str,
                       artifacts: Mapping[str, PerturbationArtifact] | PerturbationArtifact | None,
                       cfg: EvalConfig | None = None) -> ScoreSet:
    """Score every test record under ``condition``; reals are never perturbed."""
    cfg = cfg or EvalConfig()
    if condition not in CONDITIONS:
        raise ValueError(f"condition must be one of {CONDITIONS}")
    dist = cfg.draw_stream()
    entries = []
    for rec in m.split("test"):
        x = load_image(rec, m.image_size, m.root)
        if rec.label == "synthetic" and condition != "clean":
            if condition == "universal":
                art = artifacts if isinstance(artifacts, PerturbationArtifact) else None
            else:
                art = artifacts.get(rec.sample_id) if isinstance(artifacts, Mapping) else None
            if art is None:
                raise MissingArtifact(f"no {condition} artifact for {rec.sample_id}")
            x = apply_perturbation(x, art)
        if cfg.eval_mode == "pristine":
            score = d.score(x)[0]
        else:
            score = _deployment_score(d, x, dist, cfg.n_draws)
        entries.append(ScoreEntry(rec.sample_id, rec.label, rec.prompt_id, min(max(score, 0.0), 1.0)))
    return ScoreSet(entries, condition, cfg.eval_mode, cfg.seed)

