"""Command line entry point: ``deploygap {data|detector|attack|eval|report}``.

Every command accepts ``--config`` pointing at one flat JSON object whose keys
match the long option names (dashes as underscores). Explicit flags override
config keys, which override built-in defaults. Keys a command does not use are
ignored, so one config file can drive a whole run. Each output directory gets
a ``run.json`` holding the resolved configuration and its hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import __version__
from .attack import (
    CONDITIONS,
    EVAL_MODES,
    AttackConfig,
    EvalConfig,
    attack_manifest,
    evaluate_condition,
    universal_manifest,
)
from .dataset import generate_toy_dataset, load_manifest, read_manifest, validate_manifest
from .detector import (
    DetectorCheckpoint,
    ProbeConfig,
    TrainConfig,
    config_hash,
    read_embeddings,
    train_cnn_detector,
    train_linear_probe,
)
from .errors import DeployGapError, MissingArtifact, NonConvergence, ReportError
from .metrics import ScoreEntry, ScoreSet, compute_report
from .perturb import load_artifact, save_artifact
from .report import write_json, write_report
from .transforms import TransformDistribution

log = logging.getLogger("deploygap")

RUN_FILE = "run.json"
INDEX_FILE = "index.json"

_ATTACK_DEFAULTS = AttackConfig()
_TRAIN_DEFAULTS = TrainConfig()

DEFAULTS: dict[str, dict[str, Any]] = {
    "data toy": {"out": None, "n": 50, "prompts": 5, "size": 224, "seed": 0},
    "data validate": {"manifest": None},
    "detector train": {
        "manifest": None, "out": None, "kind": "cnn", "embeddings": None,
        "arch": _TRAIN_DEFAULTS.arch, "norm": _TRAIN_DEFAULTS.norm, "epochs": None,
        "batch_size": _TRAIN_DEFAULTS.batch_size, "lr": None, "weight_decay": _TRAIN_DEFAULTS.weight_decay,
        "seed": 0, "augment": _TRAIN_DEFAULTS.augment,
    },
    "attack": {
        "manifest": None, "detector": None, "out": None, "regime": "per-image",
        "band": _ATTACK_DEFAULTS.band_side, "band_fraction": _ATTACK_DEFAULTS.band_fraction,
        "epsilon": _ATTACK_DEFAULTS.epsilon, "step_size": None,
        "iterations": _ATTACK_DEFAULTS.iterations, "eot_samples": _ATTACK_DEFAULTS.eot_samples,
        "seed": 0, "universal_epochs": _ATTACK_DEFAULTS.universal_epochs,
        "universal_batch_size": _ATTACK_DEFAULTS.universal_batch_size,
        "transform_dist": None, "workers": 1,
    },
    "eval": {
        "manifest": None, "detector": None, "out": None, "per_image": None, "universal": None,
        "pairs": "clean:pristine,clean:deployment,per_image:deployment,universal:deployment",
        "n_draws": 8, "seed": 0, "stream": "heldout", "transform_dist": None,
    },
    "report": {
        "scores": None, "out": None, "bins": 15, "hist_bins": 20, "resamples": 2000, "level": 0.95,
        "seed": 0, "stratified": False, "figures": True,
    },
}

REQUIRED = {
    "data toy": ("out",),
    "data validate": ("manifest",),
    "detector train": ("manifest", "out"),
    "attack": ("manifest", "detector", "out"),
    "eval": ("manifest", "detector", "out"),
    "report": ("scores", "out"),
}


class UsageError(DeployGapError):
    exit_code = 1


# ----------------------------------------------------------------------------
# config plumbing


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        for k, v in file_cfg.items():
            if k in cfg:
                cfg[k] = v
            else:
                log.debug("config key %r unused by %s", k, command)
    for k, v in vars(args).items():
        if k in cfg:
            cfg[k] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, [], "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def write_run_file(out: str | Path, command: str, cfg: dict[str, Any], **extra: Any) -> Path:
    doc = {"command": command, "config": cfg, "config_hash": config_hash(cfg), "version": __version__}
    doc.update(extra)
    return write_json(Path(out) / RUN_FILE, doc)


def _dist(obj: Any) -> TransformDistribution:
    return TransformDistribution.from_json(obj) if obj else TransformDistribution()


def _safe_name(i: int, sample_id: str) -> str:
    return f"{i:04d}_" + re.sub(r"[^A-Za-z0-9._-]+", "_", sample_id)


# ----------------------------------------------------------------------------
# commands


def cmd_data_toy(cfg: dict[str, Any]) -> int:
    m = generate_toy_dataset(cfg["out"], int(cfg["n"]), int(cfg["prompts"]), int(cfg["size"]), int(cfg["seed"]))
    write_run_file(cfg["out"], "data toy", cfg)
    syn = sum(r.label == "synthetic" for r in m.records)
    print(f"wrote {len(m.records)} records ({len(m.records) - syn} real, {syn} synthetic, "
          f"{len(m.prompt_ids)} prompts) to {m.root}")
    return 0


def cmd_data_validate(cfg: dict[str, Any]) -> int:
    m = read_manifest(cfg["manifest"])
    violations = validate_manifest(m, check_files=True)
    if not violations:
        print(f"{m.name}: {len(m.records)} records, valid")
        return 0
    for v in violations:
        where = ",".join(str(i) for i in v.indices) or "-"
        print(f"[{v.invariant}] records {where}: {v.message}")
    print(f"{len(violations)} violation(s)")
    return 2


def _probe_clean_scores(m, ck: DetectorCheckpoint, embeddings: str) -> ScoreSet:
    paths, emb = read_embeddings(embeddings)
    probe = ck.adapter()
    rows = {p: e for p, e in zip(paths, emb)}
    test = m.split("test")
    probs = probe.score(torch.from_numpy(np.stack([rows[r.image_path] for r in test])))
    entries = [ScoreEntry(r.sample_id, r.label, r.prompt_id, float(p)) for r, p in zip(test, probs)]
    return ScoreSet(entries, "clean", "pristine", 0)


def cmd_detector_train(cfg: dict[str, Any]) -> int:
    m = load_manifest(cfg["manifest"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        if cfg["kind"] == "probe":
            if not cfg["embeddings"]:
                raise UsageError("--kind probe needs --embeddings")
            pcfg = ProbeConfig(seed=int(cfg["seed"]), weight_decay=float(cfg["weight_decay"]))
            if cfg["epochs"] is not None:
                pcfg.epochs = int(cfg["epochs"])
            if cfg["lr"] is not None:
                pcfg.lr = float(cfg["lr"])
            ck = train_linear_probe(cfg["embeddings"], m, pcfg)
        elif cfg["kind"] == "cnn":
            tcfg = TrainConfig(arch=cfg["arch"], norm=cfg["norm"], batch_size=int(cfg["batch_size"]),
                               weight_decay=float(cfg["weight_decay"]), seed=int(cfg["seed"]),
                               augment=bool(cfg["augment"]))
            if cfg["epochs"] is not None:
                tcfg.epochs = int(cfg["epochs"])
            if cfg["lr"] is not None:
                tcfg.lr = float(cfg["lr"])
            ck = train_cnn_detector(m, tcfg)
        else:
            raise UsageError(f"unknown detector kind {cfg['kind']!r}")
    except NonConvergence as exc:
        write_json(out / "nonconvergence.json",
                   {"message": str(exc), "accuracy": exc.accuracy, "loss_trace": exc.loss_trace})
        write_run_file(out, "detector train", cfg)
        raise

    ck.save(out)
    if cfg["kind"] == "probe":
        scores = _probe_clean_scores(m, ck, cfg["embeddings"])
    else:
        scores = evaluate_condition(m, ck.adapter(), "clean", None, EvalConfig("pristine"))
    scores.save(out / "scores_clean_pristine.jsonl")
    report = compute_report(scores)
    write_json(out / "metrics.json", report.to_json())
    write_run_file(out, "detector train", cfg, checkpoint_config_hash=ck.config_hash)
    print(f"trained {ck.identifier}: train accuracy {ck.train_metrics['train_accuracy']:.3f}, "
          f"clean test AUC {report.auc:.4f}, fake-to-real {report.fake_to_real_rate:.3f}")
    return 0


def attack_config_from(cfg: dict[str, Any]) -> AttackConfig:
    return AttackConfig(
        epsilon=float(cfg["epsilon"]),
        step_size=None if cfg["step_size"] is None else float(cfg["step_size"]),
        iterations=int(cfg["iterations"]),
        eot_samples=int(cfg["eot_samples"]),
        band_side=cfg["band"],
        band_fraction=float(cfg["band_fraction"]),
        transform_dist=_dist(cfg["transform_dist"]),
        seed=int(cfg["seed"]),
        universal_epochs=int(cfg["universal_epochs"]),
        universal_batch_size=int(cfg["universal_batch_size"]),
    )


def cmd_attack(cfg: dict[str, Any]) -> int:
    if cfg["regime"] not in ("per-image", "universal"):
        raise UsageError(f"unknown regime {cfg['regime']!r}")
    m = load_manifest(cfg["manifest"])
    d = DetectorCheckpoint.load(cfg["detector"]).adapter()
    acfg = attack_config_from(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    if cfg["regime"] == "per-image":
        results = attack_manifest(m, d, acfg, workers=int(cfg["workers"]))
        order = [r.sample_id for r in m.split("test", "synthetic")]
        index = {sid: _safe_name(i, sid) for i, sid in enumerate(order)}
        traces = {}
        for sid in order:
            art, trace = results[sid]
            save_artifact(art, out / "artifacts" / index[sid])
            traces[sid] = trace.to_json()
        regime = "per_image"
    else:
        art, trace = universal_manifest(m, d, acfg)
        index = {"universal": "universal"}
        save_artifact(art, out / "artifacts" / "universal")
        traces = {"universal": trace.to_json()}
        regime = "universal"

    # every artifact is re-read and validated before the command succeeds
    for name in index.values():
        load_artifact(out / "artifacts" / name)
    write_json(out / INDEX_FILE, {"regime": regime, "artifacts": index})
    write_json(out / "traces.json", traces)
    write_run_file(out, "attack", cfg, attack_config=acfg.to_json(), attack_config_hash=acfg.hash)
    final = [t["target_prob"][-1] for t in traces.values()]
    print(f"{regime}: wrote {len(index)} artifact(s) to {out}; "
          f"mean final real-probability on attack draws {float(np.mean(final)):.3f}")
    return 0


def load_artifact_set(directory: str | Path):
    """Read an attack output directory back into artifacts."""
    directory = Path(directory)
    try:
        index = json.loads((directory / INDEX_FILE).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MissingArtifact(f"no {INDEX_FILE} in {directory}") from None
    arts = {sid: load_artifact(directory / "artifacts" / name) for sid, name in index["artifacts"].items()}
    if index["regime"] == "universal":
        return arts["universal"]
    return arts


def _parse_pairs(text: str | list) -> list[tuple[str, str]]:
    items = text if isinstance(text, list) else [t for t in str(text).split(",") if t.strip()]
    pairs = []
    for item in items:
        cond, _, mode = str(item).strip().partition(":")
        if cond not in CONDITIONS or mode not in EVAL_MODES:
            raise UsageError(f"bad condition:eval_mode pair {item!r}")
        pairs.append((cond, mode))
    return pairs


def cmd_eval(cfg: dict[str, Any]) -> int:
    pairs = _parse_pairs(cfg["pairs"])
    m = load_manifest(cfg["manifest"])
    d = DetectorCheckpoint.load(cfg["detector"]).adapter()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Any] = {"clean": None}
    for cond in ("per_image", "universal"):
        if any(c == cond for c, _ in pairs):
            if not cfg[cond]:
                raise MissingArtifact(f"{cond} evaluation requested but --{cond.replace('_', '-')} not given")
            artifacts[cond] = load_artifact_set(cfg[cond])
    dist = _dist(cfg["transform_dist"])
    written = []
    for cond, mode in pairs:
        ecfg = EvalConfig(mode, int(cfg["n_draws"]), int(cfg["seed"]), dist, cfg["stream"])
        s = evaluate_condition(m, d, cond, artifacts[cond], ecfg)
        path = s.save(out / f"{s.name}.jsonl")
        written.append(path.name)
        print(f"{s.name}: {len(s.entries)} scores -> {path}")
    write_run_file(out, "eval", cfg, scoresets=written)
    return 0


def cmd_report(cfg: dict[str, Any]) -> int:
    paths = cfg["scores"] if isinstance(cfg["scores"], list) else [cfg["scores"]]
    sets = []
    for p in paths:
        try:
            sets.append(ScoreSet.load(p))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ReportError(f"cannot read ScoreSet {p}: {exc}") from exc
    names = [s.name for s in sets]
    if len(set(names)) != len(names):
        raise ReportError(f"duplicate condition/eval_mode among ScoreSets: {names}")
    out = Path(cfg["out"])
    doc = write_report(sets, out, n_bins=int(cfg["bins"]), hist_bins=int(cfg["hist_bins"]),
                       n_resamples=int(cfg["resamples"]), level=float(cfg["level"]), seed=int(cfg["seed"]),
                       stratified=bool(cfg["stratified"]), figures=bool(cfg["figures"]))
    write_run_file(out, "report", {**cfg, "scores": [str(p) for p in paths]})
    if doc["rows"]:
        print(f"{'condition':<12}{'mode':<12}{'AUC':>8}{'acc':>8}{'F->R':>8}")
        for row in doc["rows"]:
            auc = "-" if row["auc"] is None else f"{row['auc']:.3f}"
            f2r = "-" if row["fake_to_real_rate"] is None else f"{row['fake_to_real_rate']:.3f}"
            print(f"{row['condition']:<12}{row['eval_mode']:<12}{auc:>8}{row['accuracy']:>8.3f}{f2r:>8}")
    print(f"report written to {out}")
    return 0


# ----------------------------------------------------------------------------
# parser


def _opt(p: argparse.ArgumentParser, *names: str, **kw) -> None:
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deploygap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    top = parser.add_subparsers(dest="group", required=True)

    def leaf(sub, name: str, command: str, func: Callable[[dict], int], help: str):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat JSON config; flags override its keys")
        p.set_defaults(command=command, func=func)
        return p

    data = top.add_parser("data", help="toy dataset generation and manifest checks").add_subparsers(
        dest="sub", required=True)
    p = leaf(data, "toy", "data toy", cmd_data_toy, "write the procedural toy dataset")
    _opt(p, "--out")
    _opt(p, "--n", type=int, help="images per class")
    _opt(p, "--prompts", type=int)
    _opt(p, "--size", type=int)
    _opt(p, "--seed", type=int)
    p = leaf(data, "validate", "data validate", cmd_data_validate, "list manifest invariant violations")
    _opt(p, "--manifest")

    det = top.add_parser("detector", help="detector training").add_subparsers(dest="sub", required=True)
    p = leaf(det, "train", "detector train", cmd_detector_train, "train a CNN or a linear probe")
    _opt(p, "--manifest")
    _opt(p, "--out")
    _opt(p, "--kind", choices=("cnn", "probe"))
    _opt(p, "--embeddings", help="JSON-lines embeddings for --kind probe")
    _opt(p, "--arch", choices=("toycnn", "resnet18"))
    _opt(p, "--norm", choices=("batch", "group", "none"))
    _opt(p, "--epochs", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--weight-decay", type=float)
    _opt(p, "--seed", type=int)
    _opt(p, "--augment", action=argparse.BooleanOptionalAction)

    p = leaf(top, "attack", "attack", cmd_attack, "optimise band perturbations")
    _opt(p, "--manifest")
    _opt(p, "--detector", help="checkpoint directory")
    _opt(p, "--out")
    _opt(p, "--regime", choices=("per-image", "universal"))
    _opt(p, "--band", choices=("top", "bottom"))
    _opt(p, "--band-fraction", type=float)
    _opt(p, "--epsilon", type=float)
    _opt(p, "--step-size", type=float)
    _opt(p, "--iterations", type=int)
    _opt(p, "--eot-samples", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--universal-epochs", type=int)
    _opt(p, "--universal-batch-size", type=int)
    _opt(p, "--transform-dist", type=json.loads, help="TransformDistribution as a JSON object")
    _opt(p, "--workers", type=int)

    p = leaf(top, "eval", "eval", cmd_eval, "score test images per condition and eval mode")
    _opt(p, "--manifest")
    _opt(p, "--detector")
    _opt(p, "--out")
    _opt(p, "--per-image", help="per-image attack output directory")
    _opt(p, "--universal", help="universal attack output directory")
    _opt(p, "--pairs", help="comma-separated condition:eval_mode pairs")
    _opt(p, "--n-draws", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--stream", choices=("heldout", "attack"))
    _opt(p, "--transform-dist", type=json.loads)

    p = leaf(top, "report", "report", cmd_report, "metrics, CSV tables and figures")
    _opt(p, "--scores", nargs="+", help="ScoreSet JSON-lines files")
    _opt(p, "--out")
    _opt(p, "--bins", type=int, help="ECE bins")
    _opt(p, "--hist-bins", type=int)
    _opt(p, "--resamples", type=int)
    _opt(p, "--level", type=float)
    _opt(p, "--seed", type=int)
    _opt(p, "--stratified", action=argparse.BooleanOptionalAction)
    _opt(p, "--figures", action=argparse.BooleanOptionalAction)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return args.func(cfg)
    except DeployGapError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception:
        log.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
