import numpy as np
import pytest

from matres import synth
from matres import tensor as T
from matres.gradcheck import check_function
from matres.restorer import (PretrainGateError, Restorer, RestorerTrainConfig, held_out_margin, init_restorer,
                             pretrain_toy)
from matres.tensor import ShapeError


def test_encode_deterministic_and_shaped(rng):
    r = init_restorer(3)
    img = rng.random((20, 18, 3)).astype(np.float32)
    a, b = r.encode(img).data, r.encode(img).data
    assert np.array_equal(a, b) and a.shape == (16, 10, 9) == r.feature_shape((20, 18))


def test_encode_zero_image_finite():
    assert np.all(np.isfinite(init_restorer().encode(np.zeros((8, 8, 3), np.float32)).data))


def test_zero_injection_is_exact_identity(rng):
    r = init_restorer(1)
    lq, hq = rng.random((2, 16, 16, 3)).astype(np.float32)
    zero = np.zeros(r.feature_shape((16, 16)), np.float32)
    assert np.array_equal(r.restore(lq, hq, zero, zero).data, r.restore(lq, hq).data)


def test_output_clamped(rng):
    r = init_restorer(2)
    lq, hq = rng.random((2, 12, 12, 3)).astype(np.float32)
    inj = rng.standard_normal(r.feature_shape((12, 12))).astype(np.float32) * 50
    out = r.restore(lq, hq, inj, -inj).data
    assert out.shape == (12, 12, 3) and out.min() >= 0 and out.max() <= 1


def test_injection_shape_mismatch(rng):
    r = init_restorer()
    img = rng.random((8, 8, 3)).astype(np.float32)
    with pytest.raises(ShapeError, match="injection"):
        r.restore(img, img, np.zeros((16, 3, 3), np.float32))


def test_injection_gradient_matches_finite_differences(rng):
    with T.default_dtype(np.float64):
        r = init_restorer(5)
    lq, hq = rng.random((2, 8, 8, 3))
    err = check_function(lambda inj: r.restore(lq, hq, inj_lq=inj), [rng.standard_normal((16, 4, 4)) * 0.1])
    assert err < 1e-4


def test_pretrained_margin_and_frozen(pretrained):
    _, restorer = pretrained
    assert not restorer.params.trainable()
    held = synth.training_scenes(8, 7_777_777)
    assert held_out_margin(restorer, held, 0.1, 0) >= 2.0


def test_pretraining_is_byte_deterministic(tmp_path):
    cfg = RestorerTrainConfig(seed=3, steps=4, batch=2, scenes=3, held_out=1, required_margin=-np.inf)
    a, b = pretrain_toy(config=cfg), pretrain_toy(config=cfg)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert Restorer.load(tmp_path / "a").params.digest() == a.params.digest()


def test_zero_steps_fails_gate():
    with pytest.raises(PretrainGateError, match="more steps"):
        pretrain_toy(config=RestorerTrainConfig(steps=0, scenes=2, held_out=2))
