import json

import numpy as np
import pytest

from deploygap.cli import main, resolve_config, build_parser
from deploygap.perturb import load_artifact


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny end-to-end CLI run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data, det = root / "data", root / "det"
    assert main(["data", "toy", "--out", str(data), "--n", "8", "--prompts", "2", "--size", "32"]) == 0
    assert main(["detector", "train", "--manifest", str(data), "--out", str(det), "--epochs", "10",
                 "--no-augment"]) == 0
    fast = ["--iterations", "3", "--eot-samples", "2"]
    assert main(["attack", "--manifest", str(data), "--detector", str(det), "--out", str(root / "pi"), *fast]) == 0
    assert main(["attack", "--manifest", str(data), "--detector", str(det), "--out", str(root / "uni"),
                 "--regime", "universal", "--universal-epochs", "2", *fast]) == 0
    assert main(["eval", "--manifest", str(data), "--detector", str(det), "--out", str(root / "eval"),
                 "--per-image", str(root / "pi"), "--universal", str(root / "uni"), "--n-draws", "2"]) == 0
    return root


class TestData:
    def test_toy_rerun_identical(self, run, tmp_path):
        assert main(["data", "toy", "--out", str(tmp_path), "--n", "8", "--prompts", "2", "--size", "32"]) == 0
        fresh, first = _files(tmp_path), _files(run / "data")
        fresh.pop("run.json"), first.pop("run.json")  # records the differing --out path
        assert fresh == first

    def test_validate_ok(self, run):
        assert main(["data", "validate", "--manifest", str(run / "data")]) == 0

    def test_validate_corrupt(self, run, tmp_path, capsys):
        doc = json.loads((run / "data" / "manifest.json").read_text())
        doc["records"][0]["prompt_id"] = "toy_0"  # real record with a prompt
        doc["records"].append(doc["records"][1])
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        assert main(["data", "validate", "--manifest", str(tmp_path / "manifest.json")]) == 2
        out = capsys.readouterr().out
        assert "real_prompt_null" in out and "unique_path" in out

    def test_missing_manifest_is_data_error(self, tmp_path):
        assert main(["data", "validate", "--manifest", str(tmp_path / "nope.json")]) == 2


class TestConfig:
    def test_flags_override_config(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"n": 7, "seed": 3, "out": "a", "iterations": 5}))
        args = build_parser().parse_args(["data", "toy", "--config", str(cfg_path), "--seed", "9"])
        cfg = resolve_config(args.command, args)
        assert cfg == {"out": "a", "n": 7, "prompts": 5, "size": 224, "seed": 9}

    def test_missing_required(self):
        assert main(["data", "toy"]) == 1

    def test_run_files(self, run):
        for sub in ("data", "det", "pi", "uni", "eval"):
            doc = json.loads((run / sub / "run.json").read_text())
            assert len(doc["config_hash"]) == 64
            assert (run / sub / "run.json").read_text().endswith("}\n")


class TestDetectorTrain:
    def test_outputs(self, run):
        metrics = json.loads((run / "det" / "metrics.json").read_text())
        assert 0.0 <= metrics["auc"] <= 1.0
        assert (run / "det" / "params.pt").is_file()

    def test_non_convergence_exit(self, run, tmp_path):
        rc = main(["detector", "train", "--manifest", str(run / "data"), "--out", str(tmp_path),
                   "--epochs", "0", "--no-augment"])
        if rc == 3:
            trace = json.loads((tmp_path / "nonconvergence.json").read_text())
            assert trace["loss_trace"] == []
        else:
            assert rc == 0

    def test_probe(self, run, tmp_path):
        rng = np.random.default_rng(0)
        doc = json.loads((run / "data" / "manifest.json").read_text())
        with open(tmp_path / "emb.jsonl", "w") as fh:
            for r in doc["records"]:
                c = 2.0 if r["label"] == "synthetic" else -2.0
                fh.write(json.dumps({"image_path": r["image_path"], "embedding": list(rng.normal(c, 1, 4))}) + "\n")
        assert main(["detector", "train", "--kind", "probe", "--manifest", str(run / "data"),
                     "--embeddings", str(tmp_path / "emb.jsonl"), "--out", str(tmp_path / "p")]) == 0


class TestAttack:
    def test_per_image_artifacts_valid(self, run):
        index = json.loads((run / "pi" / "index.json").read_text())
        doc = json.loads((run / "data" / "manifest.json").read_text())
        n_syn_test = sum(r["split"] == "test" and r["label"] == "synthetic" for r in doc["records"])
        assert index["regime"] == "per_image" and len(index["artifacts"]) == n_syn_test
        for sid, name in index["artifacts"].items():
            art = load_artifact(run / "pi" / "artifacts" / name)
            assert art.source_image_id == sid

    def test_universal_single_artifact(self, run):
        index = json.loads((run / "uni" / "index.json").read_text())
        assert index == {"artifacts": {"universal": "universal"}, "regime": "universal"}
        assert load_artifact(run / "uni" / "artifacts" / "universal").source_image_id is None

    def test_zero_epsilon(self, run, tmp_path):
        assert main(["attack", "--manifest", str(run / "data"), "--detector", str(run / "det"),
                     "--out", str(tmp_path), "--epsilon", "0", "--iterations", "2"]) == 0
        for d in (tmp_path / "artifacts").iterdir():
            assert not load_artifact(d).delta.any()

    def test_workers_do_not_change_output(self, run, tmp_path):
        args = ["attack", "--manifest", str(run / "data"), "--detector", str(run / "det"),
                "--iterations", "3", "--eot-samples", "2"]
        assert main(args + ["--out", str(tmp_path / "w3"), "--workers", "3"]) == 0
        a, b = _files(tmp_path / "w3" / "artifacts"), _files(run / "pi" / "artifacts")
        assert a == b

    def test_infeasible_artifact_is_exit_4(self, run, tmp_path):
        import shutil

        shutil.copytree(run / "uni", tmp_path / "uni")
        raw = bytearray((tmp_path / "uni" / "artifacts" / "universal" / "delta.f32").read_bytes())
        raw[0:4] = np.float32(0.5).tobytes()
        (tmp_path / "uni" / "artifacts" / "universal" / "delta.f32").write_bytes(bytes(raw))
        rc = main(["eval", "--manifest", str(run / "data"), "--detector", str(run / "det"),
                   "--out", str(tmp_path / "e"), "--universal", str(tmp_path / "uni"),
                   "--pairs", "universal:pristine"])
        assert rc == 4


class TestEval:
    def test_files(self, run):
        names = sorted(p.name for p in (run / "eval").glob("*.jsonl"))
        assert names == ["clean_deployment.jsonl", "clean_pristine.jsonl",
                         "per_image_deployment.jsonl", "universal_deployment.jsonl"]

    def test_missing_artifacts_exit_5(self, run, tmp_path):
        rc = main(["eval", "--manifest", str(run / "data"), "--detector", str(run / "det"),
                   "--out", str(tmp_path), "--pairs", "per_image:pristine"])
        assert rc == 5

    def test_identity_distribution(self, run, tmp_path):
        ident = json.dumps({"kind_weights": {"identity": 1.0}})
        assert main(["eval", "--manifest", str(run / "data"), "--detector", str(run / "det"),
                     "--out", str(tmp_path), "--pairs", "clean:pristine,clean:deployment",
                     "--transform-dist", ident]) == 0
        a = (tmp_path / "clean_pristine.jsonl").read_text().splitlines()[1:]
        b = (tmp_path / "clean_deployment.jsonl").read_text().splitlines()[1:]
        assert a == b

    def test_seeded_rerun_identical(self, run, tmp_path):
        assert main(["eval", "--manifest", str(run / "data"), "--detector", str(run / "det"), "--out",
                     str(tmp_path), "--per-image", str(run / "pi"), "--universal", str(run / "uni"),
                     "--n-draws", "2"]) == 0
        for name in ("clean_deployment.jsonl", "per_image_deployment.jsonl"):
            assert (tmp_path / name).read_bytes() == (run / "eval" / name).read_bytes()


class TestReport:
    def test_comparison_rows(self, run, tmp_path):
        scores = sorted(str(p) for p in (run / "eval").glob("*.jsonl"))
        assert main(["report", "--scores", *scores, "--out", str(tmp_path), "--resamples", "200"]) == 0
        doc = json.loads((tmp_path / "comparison.json").read_text())
        assert [r["condition"] for r in doc["rows"]] == ["clean", "per_image", "universal"]
        assert all(r["eval_mode"] == "deployment" for r in doc["rows"])
        for sub in ("clean_pristine", "per_image_deployment"):
            for f in ("metrics.json", "histogram.csv", "reliability.csv", "per_prompt.csv"):
                assert (tmp_path / sub / f).is_file()
        header = (tmp_path / "per_image_deployment" / "histogram.csv").read_text().splitlines()[0]
        assert header == "label,bin_lo,bin_hi,count"

    def test_single_scoreset_empty_comparison(self, run, tmp_path):
        assert main(["report", "--scores", str(run / "eval" / "clean_pristine.jsonl"),
                     "--out", str(tmp_path), "--resamples", "100", "--no-figures"]) == 0
        assert json.loads((tmp_path / "comparison.json").read_text())["rows"] == []

    def test_rerun_identical(self, run, tmp_path):
        scores = sorted(str(p) for p in (run / "eval").glob("*.jsonl"))
        for sub in ("a", "b"):
            assert main(["report", "--scores", *scores, "--out", str(tmp_path / sub),
                         "--resamples", "100", "--no-figures"]) == 0
        a = {k: v for k, v in _files(tmp_path / "a").items() if k != "run.json"}
        b = {k: v for k, v in _files(tmp_path / "b").items() if k != "run.json"}
        assert a == b and a

    def test_unreadable_scoreset_exit_6(self, tmp_path):
        (tmp_path / "bad.jsonl").write_text("not json\n")
        assert main(["report", "--scores", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "r")]) == 6

    def test_figure_failure_degrades(self, run, tmp_path, monkeypatch):
        import deploygap.report as rep

        def boom(*a, **k):
            raise RuntimeError("no backend")

        monkeypatch.setattr(rep, "_figures", boom)
        assert main(["report", "--scores", str(run / "eval" / "clean_pristine.jsonl"),
                     "--out", str(tmp_path), "--resamples", "100"]) == 0
        assert (tmp_path / "clean_pristine" / "histogram.csv").is_file()
