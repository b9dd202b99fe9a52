import numpy as np
import pytest
import torch

from deploygap.dataset import generate_toy_dataset, load_image
from deploygap.detector import (
    DetectorCheckpoint,
    LinearProbeDetector,
    ProbeConfig,
    ToyCNN,
    TrainConfig,
    build_detector,
    config_hash,
    load_detector,
    train_cnn_detector,
    train_linear_probe,
    write_embeddings,
)
from deploygap.errors import AlignmentError, InsufficientData, NonConvergence, ShapeMismatch


@pytest.fixture(scope="module")
def small_toy(tmp_path_factory):
    return generate_toy_dataset(tmp_path_factory.mktemp("toy64"), n_per_class=20, n_prompts=2,
                                image_size=64, seed=3)


@pytest.fixture(scope="module")
def small_ckpt(small_toy):
    return train_cnn_detector(small_toy, TrainConfig(epochs=8, augment=False, seed=0))


def _zero_head(size=32):
    d = ToyCNN(size)
    torch.nn.init.zeros_(d.head.weight)
    torch.nn.init.zeros_(d.head.bias)
    return d.eval()


class TestScore:
    def test_zero_head_gives_half(self, rng):
        d = _zero_head()
        x = torch.from_numpy(rng.random((4, 3, 32, 32)).astype(np.float32))
        assert d.score(x) == [0.5] * 4

    def test_deterministic_and_in_range(self, rng):
        torch.manual_seed(0)
        d = ToyCNN(32).eval()
        x = torch.from_numpy(rng.random((5, 3, 32, 32)).astype(np.float32))
        a, b = d.score(x), d.score(x)
        assert a == b
        assert all(0.0 <= p <= 1.0 for p in a)

    def test_list_and_single_inputs(self, rng):
        torch.manual_seed(0)
        d = ToyCNN(32).eval()
        imgs = [torch.from_numpy(rng.random((3, 32, 32)).astype(np.float32)) for _ in range(3)]
        assert d.score(imgs) == d.score(torch.stack(imgs))
        assert d.score(imgs[1]) == [d.score(imgs)[1]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ToyCNN(32).score(torch.zeros(3, 16, 16))

    def test_input_gradient_available(self, rng):
        torch.manual_seed(0)
        d = ToyCNN(32).eval()
        x = torch.from_numpy(rng.random((1, 3, 32, 32)).astype(np.float32)).requires_grad_(True)
        d(x).sum().backward()
        assert x.grad is not None and float(x.grad.abs().sum()) > 0

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            build_detector("vgg")


class TestTraining:
    def test_reaches_train_accuracy(self, small_ckpt):
        assert small_ckpt.train_metrics["train_accuracy"] >= 0.95

    def test_deterministic(self, small_toy, small_ckpt):
        again = train_cnn_detector(small_toy, TrainConfig(epochs=8, augment=False, seed=0))
        for k, v in small_ckpt.state_dict.items():
            assert torch.equal(v, again.state_dict[k]), k

    def test_checkpoint_round_trip(self, small_toy, small_ckpt, tmp_path):
        small_ckpt.save(tmp_path / "ck")
        loaded = load_detector(tmp_path / "ck")
        imgs = [load_image(r, 64, small_toy.root) for r in small_toy.split("test")]
        a = np.array(small_ckpt.adapter().score(imgs))
        b = np.array(loaded.score(imgs))
        assert np.abs(a - b).max() <= 1e-6
        meta = DetectorCheckpoint.load(tmp_path / "ck")
        assert meta.config_hash == config_hash(small_ckpt.config)

    def test_zero_epochs_surfaces_non_convergence(self, small_toy):
        try:
            ck = train_cnn_detector(small_toy, TrainConfig(epochs=0, augment=False))
        except NonConvergence as exc:
            assert exc.loss_trace == [] and exc.accuracy < 0.8
        else:
            assert abs(ck.train_metrics["train_accuracy"] - 0.5) <= 0.2

    def test_single_label_rejected(self, small_toy):
        from dataclasses import replace

        only_real = replace(small_toy, records=[r for r in small_toy.records if r.label == "real"])
        with pytest.raises(InsufficientData):
            train_cnn_detector(only_real, TrainConfig(epochs=1))


def _blob_embeddings(manifest, rng, dim=8, sep=4.0):
    rows = []
    for r in manifest.records:
        centre = sep if r.label == "synthetic" else -sep
        rows.append(rng.standard_normal(dim) + centre / np.sqrt(dim))
    return np.stack(rows)


class TestLinearProbe:
    def test_separable_blobs(self, small_toy, rng, tmp_path):
        emb = _blob_embeddings(small_toy, rng)
        path = tmp_path / "emb.jsonl"
        write_embeddings(path, [r.image_path for r in small_toy.records], emb)
        ck = train_linear_probe(path, small_toy, ProbeConfig(epochs=300))
        probe = ck.adapter()
        test = [i for i, r in enumerate(small_toy.records) if r.split == "test"]
        probs = np.array(probe.score(torch.from_numpy(emb[test].astype(np.float32))))
        labels = np.array([small_toy.records[i].label == "synthetic" for i in test])
        assert np.mean((probs >= 0.5) == labels) >= 0.99
        assert not probe.differentiable

    def test_identical_embeddings_do_not_converge(self, small_toy, tmp_path):
        path = tmp_path / "emb.jsonl"
        write_embeddings(path, [r.image_path for r in small_toy.records], np.ones((len(small_toy.records), 4)))
        with pytest.raises(NonConvergence) as exc:
            train_linear_probe(path, small_toy, ProbeConfig(epochs=50))
        assert exc.value.accuracy == pytest.approx(0.5)

    def test_permuted_rows(self, small_toy, rng, tmp_path):
        paths = [r.image_path for r in small_toy.records]
        paths[0], paths[1] = paths[1], paths[0]
        path = tmp_path / "emb.jsonl"
        write_embeddings(path, paths, _blob_embeddings(small_toy, rng))
        with pytest.raises(AlignmentError):
            train_linear_probe(path, small_toy)

    def test_embed_fn_makes_probe_attackable(self):
        probe = LinearProbeDetector(3, embed_fn=lambda x: x.mean(dim=(-2, -1)))
        assert probe.differentiable
        x = torch.rand(1, 3, 8, 8, requires_grad=True)
        probe(x).sum().backward()
        assert x.grad is not None
