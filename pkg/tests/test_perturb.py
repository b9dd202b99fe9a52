import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deploygap.errors import DegenerateBand, MalformedArtifact, ShapeMismatch
from deploygap.perturb import (
    DEFAULT_EPSILON,
    apply_perturbation,
    build_band_mask,
    epsilon_bound,
    load_artifact,
    make_artifact,
    project,
    save_artifact,
)

EPS = 16 / 255


class TestBandMask:
    def test_bottom_default(self):
        m = build_band_mask(224, 224, "bottom", 0.22)
        assert m.rows == 49
        arr = m.array()
        assert arr[175:].all() and not arr[:175].any()

    def test_top(self):
        m = build_band_mask(224, 224, "top", 0.22)
        arr = m.array()
        assert arr[:49].all() and not arr[49:].any()

    def test_degenerate(self):
        with pytest.raises(DegenerateBand):
            build_band_mask(8, 8, "top", 0.05)

    @pytest.mark.parametrize("args", [(4, 8, "top", 0.5), (8, 8, "left", 0.5), (8, 8, "top", 0.0), (8, 8, "top", 1.5)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            build_band_mask(*args)

    @given(h=st.integers(8, 300), frac=st.floats(0.01, 1.0))
    def test_band_area(self, h, frac):
        try:
            m = build_band_mask(h, 8, "bottom", frac)
        except DegenerateBand:
            assert frac * h < 1
            return
        assert frac - 1 / h <= m.rows / h <= frac
        assert m.array().sum() == m.rows * 8


class TestProject:
    def test_feasible_unchanged(self, rng):
        m = build_band_mask(32, 32, "bottom", 0.25)
        d = torch.from_numpy(rng.uniform(-0.01, 0.01, (3, 32, 32)).astype(np.float32)) * m.tensor()
        assert torch.equal(project(d, m, EPS), d)

    def test_ones_clamped_and_masked(self):
        m = build_band_mask(224, 224, "bottom", 0.22)
        out = project(torch.ones(3, 224, 224, dtype=torch.float64), m, EPS)
        assert (out[:, 175:] == EPS).all()
        assert (out[:, :175] == 0).all()

    def test_shape_mismatch(self):
        m = build_band_mask(32, 32, "top", 0.25)
        with pytest.raises(ShapeMismatch):
            project(torch.zeros(3, 16, 32), m, EPS)

    def test_float32_bound_never_exceeds_epsilon(self):
        b = epsilon_bound(EPS, torch.float32)
        assert b <= EPS and np.float32(b) == b
        assert EPS - b < 1e-8

    def test_outside_zero_is_positive_zero(self):
        m = build_band_mask(16, 16, "top", 0.5)
        out = project(-torch.ones(3, 16, 16), m, EPS)
        assert not torch.signbit(out[:, 8:]).any()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 2.0))
    def test_idempotent_and_contractive(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        m = build_band_mask(24, 24, "bottom", 0.3)
        a = scale * torch.randn(3, 24, 24, generator=g)
        b = scale * torch.randn(3, 24, 24, generator=g)
        pa = project(a, m, EPS)
        assert torch.equal(project(pa, m, EPS), pa)
        assert float((pa - project(b, m, EPS)).abs().max()) <= float((a - b).abs().max()) + 1e-7
        assert float(pa.abs().max()) <= EPS


def _artifact(rng, regime="universal", side="bottom"):
    m = build_band_mask(32, 32, side, 0.22)
    d = project(torch.from_numpy(rng.uniform(-1, 1, (3, 32, 32)).astype(np.float32)), m, EPS)
    return make_artifact(d, m, EPS, regime, None if regime == "universal" else "img_0", "abc123")


class TestApply:
    def test_zero_delta(self, rng):
        a = make_artifact(np.zeros((3, 32, 32), np.float32), build_band_mask(32, 32), EPS,
                          "universal", None, "h")
        x = torch.from_numpy(rng.random((3, 32, 32)).astype(np.float32))
        assert torch.equal(apply_perturbation(x, a), x)

    def test_clamped_at_one(self):
        m = build_band_mask(32, 32, "bottom", 0.22)
        a = make_artifact(project(torch.ones(3, 32, 32), m, EPS), m, EPS, "universal", None, "h")
        out = apply_perturbation(torch.ones(3, 32, 32), a)
        assert (out == 1).all()

    def test_support_in_band(self, rng):
        a = _artifact(rng)
        x = torch.from_numpy(rng.uniform(0.1, 0.9, (3, 32, 32)).astype(np.float32))
        diff = (apply_perturbation(x, a) - x).abs().sum(dim=(0, 2))
        rows = set(torch.nonzero(diff).flatten().tolist())
        assert rows <= set(a.mask.row_range)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            apply_perturbation(torch.zeros(3, 16, 16), _artifact(rng))


class TestArtifactIO:
    @pytest.mark.parametrize("regime", ["universal", "per_image"])
    def test_round_trip(self, tmp_path, rng, regime):
        a = _artifact(rng, regime)
        save_artifact(a, tmp_path / "a")
        b = load_artifact(tmp_path / "a")
        assert a == b
        assert b.delta.tobytes() == a.delta.tobytes()
        assert b.regime == regime

    def test_layout(self, tmp_path, rng):
        a = _artifact(rng)
        save_artifact(a, tmp_path)
        raw = (tmp_path / "delta.f32").read_bytes()
        assert raw == a.delta.astype("<f4").tobytes()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["dtype"] == "f32le" and meta["layout"] == "CHW" and meta["shape"] == [3, 32, 32]

    def test_corrupt_epsilon(self, tmp_path, rng):
        a = _artifact(rng)
        save_artifact(a, tmp_path)
        d = a.delta.copy()
        r = a.mask.row_range.start
        d[0, r, 0] = 2 * EPS
        (tmp_path / "delta.f32").write_bytes(d.astype("<f4").tobytes())
        with pytest.raises(MalformedArtifact) as exc:
            load_artifact(tmp_path)
        assert exc.value.field == "epsilon"

    def test_corrupt_support(self, tmp_path, rng):
        a = _artifact(rng)
        save_artifact(a, tmp_path)
        d = a.delta.copy()
        d[1, 0, 0] = 0.01
        (tmp_path / "delta.f32").write_bytes(d.astype("<f4").tobytes())
        with pytest.raises(MalformedArtifact) as exc:
            load_artifact(tmp_path)
        assert exc.value.field == "mask"

    def test_universal_with_source_rejected(self, tmp_path, rng):
        save_artifact(_artifact(rng), tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        meta["source_image_id"] = "img_3"
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(MalformedArtifact) as exc:
            load_artifact(tmp_path)
        assert exc.value.field == "source_image_id"

    def test_truncated_delta(self, tmp_path, rng):
        save_artifact(_artifact(rng), tmp_path)
        raw = (tmp_path / "delta.f32").read_bytes()
        (tmp_path / "delta.f32").write_bytes(raw[:-4])
        with pytest.raises(MalformedArtifact):
            load_artifact(tmp_path)

    def test_make_artifact_rejects_infeasible(self):
        m = build_band_mask(16, 16)
        with pytest.raises(MalformedArtifact):
            make_artifact(np.full((3, 16, 16), 0.5, np.float32), m, EPS, "universal", None, "h")


def test_default_epsilon():
    assert DEFAULT_EPSILON == 16 / 255
