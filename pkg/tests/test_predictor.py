import math

import numpy as np
import pytest
import torch

from hoshape import predictor as P
from hoshape.camera import CameraIntrinsics, CameraView, HandPose
from hoshape.fusion import ViewProbabilities
from hoshape.predictor import (
    AmbiguousEmptyCode,
    ClassWeights,
    PredictorConfig,
    TrainingSample,
    ViewPredictor,
    identify_empty_index,
    predict_view,
    train_predictor,
    weighted_cross_entropy,
    weighted_cross_entropy_logits,
)

from conftest import SMALL_SPEC

INTR = CameraIntrinsics(60.0, 60.0, 16.0, 16.0, 32, 32)
POSE = HandPose(np.eye(3), np.array([0.0, 0.0, -0.4]))


class TestWeightedCE:
    def test_one_hot_zero(self):
        z = np.array([[[0, 2], [1, 3]]])
        assert weighted_cross_entropy(np.eye(4)[z], z, ClassWeights(0)) == 0.0

    def test_hand_computed_ln4(self):
        probs = np.full((1, 1, 2, 4), 0.25)
        target = np.array([[[0, 2]]])
        assert weighted_cross_entropy(probs, target, ClassWeights(0)) == pytest.approx(math.log(4), abs=1e-12)

    def test_equal_weights_is_plain_mean(self):
        rng = np.random.default_rng(0)
        p = rng.random((2, 2, 2, 5))
        p /= p.sum(-1, keepdims=True)
        z = rng.integers(0, 5, size=(2, 2, 2))
        plain = -np.mean(np.log(np.take_along_axis(p, z[..., None], -1)))
        assert weighted_cross_entropy(p, z, ClassWeights(1, 0.5, 0.5)) == pytest.approx(plain, rel=1e-12)

    def test_weighting_oracle(self):
        rng = np.random.default_rng(1)
        p = rng.random((2, 2, 2, 4))
        p /= p.sum(-1, keepdims=True)
        z = rng.integers(0, 4, size=(2, 2, 2))
        num = den = 0.0
        for c in np.ndindex(2, 2, 2):
            w = 0.25 if z[c] == 2 else 0.75
            num += w * -math.log(p[c][z[c]])
            den += w
        assert weighted_cross_entropy(p, z, ClassWeights(2)) == pytest.approx(num / den, rel=1e-12)
        # the training form on logits agrees
        logits = torch.from_numpy(np.log(p))[None]
        got = weighted_cross_entropy_logits(logits, torch.from_numpy(z)[None], ClassWeights(2))
        assert got.item() == pytest.approx(num / den, rel=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            weighted_cross_entropy(np.full((1, 1, 1, 4), 0.25), np.array([[[4]]]), ClassWeights(0))
        with pytest.raises(ValueError):
            ClassWeights(0, 0.0, 0.75)
        with pytest.raises(ValueError):
            ClassWeights(5).vector(4)


class TestEmptyIndex:
    def test_constant_cube(self, small_model):
        idx = identify_empty_index(small_model)
        from hoshape.autoencoder import encode_grid
        from hoshape.tsdf import TsdfGrid

        _, cube = encode_grid(TsdfGrid.empty(SMALL_SPEC), small_model)
        assert np.all(cube == idx)

    def test_ambiguous_reports_histogram(self, small_model, monkeypatch):
        cube = np.zeros((4, 4, 4), dtype=np.int64)
        cube[0, 0, 0] = 3
        monkeypatch.setattr(P, "encode_grid", lambda g, m: (None, cube))
        with pytest.raises(AmbiguousEmptyCode, match=r"\{0: 63, 3: 1\}"):
            identify_empty_index(small_model)


def make_predictor(seed=0):
    cfg = PredictorConfig(feat_dim=8, hidden=8, seed=seed, epochs=2, batch_size=4)
    return ViewPredictor(SMALL_SPEC, 4, 8, 6, 0, 0, cfg)


class TestPredictView:
    def view(self, seed=0):
        img = np.random.default_rng(seed).random((32, 32, 3)).astype(np.float32)
        return CameraView(img, INTR, POSE, "0")

    def test_normalised_and_deterministic(self):
        model = make_predictor()
        h1, o1 = predict_view(self.view(), model)
        h2, o2 = predict_view(self.view(), model)
        assert h1.probs.shape == (4, 4, 4, 8) and o1.probs.shape == (4, 4, 4, 6)
        np.testing.assert_allclose(h1.probs.sum(-1), 1.0, atol=1e-5)
        np.testing.assert_allclose(o1.probs.sum(-1), 1.0, atol=1e-5)
        assert np.array_equal(h1.probs, h2.probs) and np.array_equal(o1.probs, o2.probs)
        assert h1.shape_class == "hand" and o1.shape_class == "object"

    def test_missing_inputs(self):
        with pytest.raises(ValueError):
            predict_view(CameraView(None, INTR, POSE), make_predictor())
        with pytest.raises(ValueError):
            predict_view(CameraView(np.zeros((32, 32, 3)), INTR, None), make_predictor())

    def test_save_load(self, tmp_path):
        model = make_predictor()
        model.save(tmp_path / "p")
        loaded = ViewPredictor.load(tmp_path / "p")
        a, _ = predict_view(self.view(), model)
        b, _ = predict_view(self.view(), loaded)
        assert np.array_equal(a.probs, b.probs)


class TestTrainPredictor:
    def samples(self, hand_model, n=6):
        rng = np.random.default_rng(0)
        out = []
        for i in range(n):
            img = rng.random((32, 32, 3)).astype(np.float32)
            out.append(TrainingSample(f"{i:03d}/0", img, INTR, POSE,
                                      rng.integers(0, 8, size=(4, 4, 4)), rng.integers(0, 8, size=(4, 4, 4))))
        return out

    def test_order_invariant_and_reproducible(self, small_model):
        cfg = PredictorConfig(feat_dim=8, hidden=8, epochs=2, batch_size=3)
        s = self.samples(small_model)
        m1, r1 = train_predictor(s, small_model, small_model, cfg)
        m2, r2 = train_predictor(s[::-1], small_model, small_model, cfg)
        assert r1 == r2
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)
        assert [r["step"] for r in r1] == list(range(len(r1)))

    def test_shape_checks(self, small_model):
        s = self.samples(small_model, 2)
        s[0].hand = np.zeros((8, 8, 8), dtype=np.int64)
        with pytest.raises(ValueError):
            train_predictor(s, small_model, small_model, PredictorConfig())
        with pytest.raises(ValueError):
            train_predictor([], small_model, small_model, PredictorConfig())
