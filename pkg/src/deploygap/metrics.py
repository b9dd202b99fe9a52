"""Detection and calibration statistics over scored samples.

The synthetic class is the positive class throughout. A sample is predicted
synthetic when its score is at or above the decision threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy.stats import rankdata

from .errors import NonConvergentResampling, SingleClass

METRICS = ("auc", "accuracy", "fake_to_real_rate")


@dataclass(frozen=True)
class ScoreEntry:
    sample_id: str
    label: str
    prompt_id: str | None
    score: float


@dataclass
class ScoreSet:
    entries: list[ScoreEntry]
    condition: str = "clean"
    eval_mode: str = "pristine"
    seed: int = 0

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("sample_ids must be unique")
        for e in self.entries:
            if not 0.0 <= e.score <= 1.0:
                raise ValueError(f"score {e.score!r} for {e.sample_id} outside [0, 1]")
            if e.label not in ("real", "synthetic"):
                raise ValueError(f"unknown label {e.label!r}")

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def is_synthetic(self) -> np.ndarray:
        return np.array([e.label == "synthetic" for e in self.entries], dtype=bool)

    @property
    def name(self) -> str:
        return f"{self.condition}_{self.eval_mode}"

    def header(self) -> dict[str, Any]:
        return {"condition": self.condition, "eval_mode": self.eval_mode, "seed": self.seed}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ScoreSet":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path} is empty")
        head = json.loads(lines[0])
        entries = []
        for ln in lines[1:]:
            obj = json.loads(ln)
            entries.append(ScoreEntry(obj["sample_id"], obj["label"], obj.get("prompt_id"), float(obj["score"])))
        return cls(entries, head["condition"], head["eval_mode"], int(head["seed"]))


# ----------------------------------------------------------------------------
# point metrics on arrays


def _auc(scores: np.ndarray, pos: np.ndarray) -> float:
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both real and synthetic entries")
    ranks = rankdata(scores)  # average ranks: ties count one half
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _fake_to_real(scores: np.ndarray, pos: np.ndarray, threshold: float) -> float:
    n_syn = int(pos.sum())
    if n_syn == 0:
        raise SingleClass("fake-to-real rate needs synthetic entries")
    return float(np.count_nonzero(scores[pos] < threshold) / n_syn)


def _accuracy(scores: np.ndarray, pos: np.ndarray, threshold: float) -> float:
    return float(np.mean((scores >= threshold) == pos))


def auc(s: ScoreSet) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    return _auc(s.scores, s.is_synthetic)


def threshold_metrics(s: ScoreSet, threshold: float = 0.5) -> dict[str, float]:
    scores, pos = s.scores, s.is_synthetic
    return {
        "accuracy": _accuracy(scores, pos, threshold),
        "fake_to_real_rate": _fake_to_real(scores, pos, threshold),
    }


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    mean_confidence: float | None
    accuracy: float | None
    count: int


def ece(s: ScoreSet, n_bins: int = 15) -> tuple[float, list[ReliabilityBin]]:
    """Binary expected calibration error over equal-width confidence bins on [0.5, 1]."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    scores, pos = s.scores, s.is_synthetic
    pred = scores >= 0.5
    conf = np.maximum(scores, 1.0 - scores)
    correct = pred == pos
    edges = np.linspace(0.5, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)

    total = 0.0
    bins = []
    n = len(scores)
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if count == 0:
            bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), None, None, 0))
            continue
        mc = float(conf[sel].mean())
        acc = float(correct[sel].mean())
        total += count / n * abs(acc - mc)
        bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), mc, acc, count))
    return float(total), bins


def per_prompt_rates(s: ScoreSet, threshold: float = 0.5) -> dict[str, float]:
    return {p: r for p, (r, _) in per_prompt_counts(s, threshold).items()}


def per_prompt_counts(s: ScoreSet, threshold: float = 0.5) -> dict[str, tuple[float, int]]:
    groups: dict[str, list[float]] = {}
    for e in s.entries:
        if e.label == "synthetic" and e.prompt_id is not None:
            groups.setdefault(e.prompt_id, []).append(e.score)
    out = {}
    for p in sorted(groups):
        v = np.asarray(groups[p])
        out[p] = (float(np.count_nonzero(v < threshold) / v.size), int(v.size))
    return out


def histogram(s: ScoreSet, n_bins: int = 20) -> dict[str, Any]:
    """Equal-width score histogram over [0, 1], separately per label."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    scores, pos = s.scores, s.is_synthetic
    idx = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, n_bins - 1)
    counts = {}
    for label, sel in (("real", ~pos), ("synthetic", pos)):
        counts[label] = np.bincount(idx[sel], minlength=n_bins).astype(int).tolist()
    return {"edges": edges.tolist(), "counts": counts}


# ----------------------------------------------------------------------------
# bootstrap


def _metric_rows(metric: str, scores: np.ndarray, pos: np.ndarray, threshold: float) -> np.ndarray:
    """Metric per resample row; NaN marks degenerate rows."""
    n_pos = pos.sum(axis=1)
    n_neg = pos.shape[1] - n_pos
    if metric == "accuracy":
        return np.mean((scores >= threshold) == pos, axis=1)
    if metric == "fake_to_real_rate":
        flips = np.sum((scores < threshold) & pos, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n_pos > 0, flips / np.maximum(n_pos, 1), np.nan)
    if metric == "auc":
        ranks = rankdata(scores, axis=1)
        u = np.sum(ranks * pos, axis=1) - n_pos * (n_pos + 1) / 2.0
        denom = n_pos * n_neg
        return np.where(denom > 0, u / np.maximum(denom, 1), np.nan)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def point_metric(s: ScoreSet, metric: str, threshold: float = 0.5) -> float:
    scores, pos = s.scores, s.is_synthetic
    if metric == "auc":
        return _auc(scores, pos)
    if metric == "accuracy":
        return _accuracy(scores, pos, threshold)
    if metric == "fake_to_real_rate":
        return _fake_to_real(scores, pos, threshold)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def bootstrap_ci(s: ScoreSet, metric: str, n_resamples: int = 2000, level: float = 0.95,
                 seed: int = 0, stratified: bool = False, threshold: float = 0.5) -> dict[str, Any]:
    """Percentile bootstrap interval for ``metric``.

    Resamples that cannot define the metric (a single class for AUC, no
    synthetic entries for the fake-to-real rate) are redrawn; the redraw count
    is reported. More than half of all draws being degenerate is an error.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    scores, pos = s.scores, s.is_synthetic
    n = scores.size
    rng = np.random.default_rng(seed)

    def draw(k: int) -> np.ndarray:
        if not stratified:
            return rng.integers(0, n, size=(k, n))
        parts = [np.flatnonzero(sel) for sel in (~pos, pos)]
        cols = [p[rng.integers(0, p.size, size=(k, p.size))] for p in parts if p.size]
        return np.concatenate(cols, axis=1)

    idx = draw(n_resamples)
    values = _metric_rows(metric, scores[idx], pos[idx], threshold)
    redraws = 0
    while True:
        bad = np.flatnonzero(np.isnan(values))
        if bad.size == 0:
            break
        redraws += bad.size
        if redraws > n_resamples:  # degenerate draws now exceed half the total
            raise NonConvergentResampling(
                f"{redraws} of {n_resamples + redraws} resamples degenerate for {metric}")
        new = draw(bad.size)
        values[bad] = _metric_rows(metric, scores[new], pos[new], threshold)

    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)], method="linear")
    return {
        "mean": float(values.mean()),
        "lo": float(lo),
        "hi": float(hi),
        "n_resamples": int(n_resamples),
        "level": float(level),
        "redraws": int(redraws),
    }


# ----------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    condition: str
    eval_mode: str
    n: int
    auc: float | None
    accuracy: float
    fake_to_real_rate: float | None
    ece: float
    n_bins: int
    reliability_bins: list[ReliabilityBin]
    per_prompt: dict[str, float]
    per_prompt_n: dict[str, int]
    histograms: dict[str, Any]
    cis: dict[str, dict[str, Any]] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["reliability_bins"] = [asdict(b) for b in self.reliability_bins]
        return d


def compute_report(s: ScoreSet, n_bins: int = 15, hist_bins: int = 20, n_resamples: int = 2000,
                   level: float = 0.95, seed: int = 0, threshold: float = 0.5,
                   metrics: Iterable[str] = METRICS, stratified: bool = False) -> MetricsReport:
    scores, pos = s.scores, s.is_synthetic
    has_both = 0 < pos.sum() < pos.size
    e, bins = ece(s, n_bins)
    counts = per_prompt_counts(s, threshold)
    cis = {}
    for m in metrics:
        if m == "auc" and not has_both or m == "fake_to_real_rate" and not pos.any():
            continue
        cis[m] = bootstrap_ci(s, m, n_resamples, level, seed, stratified, threshold)
        cis[m]["point"] = point_metric(s, m, threshold)
    return MetricsReport(
        condition=s.condition,
        eval_mode=s.eval_mode,
        n=int(scores.size),
        auc=auc(s) if has_both else None,
        accuracy=_accuracy(scores, pos, threshold),
        fake_to_real_rate=_fake_to_real(scores, pos, threshold) if pos.any() else None,
        ece=e,
        n_bins=n_bins,
        reliability_bins=bins,
        per_prompt={p: r for p, (r, _) in counts.items()},
        per_prompt_n={p: c for p, (_, c) in counts.items()},
        histograms=histogram(s, hist_bins),
        cis=cis,
    )
