import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from matres import evalkit, geometry, synth
from matres.synth import PairSpec


@pytest.mark.parametrize("kind", synth.SCENE_KINDS)
def test_scene_deterministic_and_nondegenerate(kind):
    a = synth.gen_scene(11, kind)
    assert np.array_equal(a, synth.gen_scene(11, kind))
    assert a.shape == (64, 64, 3) and a.min() >= 0 and a.max() <= 1
    assert a.std() > 0.05


def test_corpus_scenes_have_spread(corpus):
    assert min(p.truth.clean.std() for p in corpus) > 0.05


def test_checker_has_two_levels_before_filtering():
    img = synth.gen_scene(3, "checker", antialias=False)
    for c in range(3):
        assert len(np.unique(img[..., c])) == 2


def test_unknown_scene_kind():
    with pytest.raises(ValueError, match="unknown scene"):
        synth.gen_scene(0, "stripes")


def test_null_degradation_is_identity():
    img = synth.gen_scene(5, "mixed")
    out, record = synth.degrade(img, PairSpec())
    assert np.array_equal(out, img) and record == []


@pytest.mark.parametrize("blur", ["gaussian", "box"])
def test_blur_preserves_constants(blur):
    img = np.full((16, 16, 3), 0.37)
    out, _ = synth.degrade(img, PairSpec(blur=blur, blur_k=5))
    assert np.allclose(out, 0.37, atol=1e-12)


def test_blockwise_constant_survives_downsample_exactly_at_block_means():
    rng = np.random.default_rng(0)
    blocks = rng.random((8, 8, 3))
    img = np.kron(blocks, np.ones((2, 2, 1)))
    assert np.array_equal(synth.area_downsample(img, 2), blocks)


def test_blockwise_constant_roundtrip_is_bilinear_of_block_means():
    # flat regions larger than the bilinear support come back unchanged
    img = np.zeros((16, 16, 3))
    img[:, 8:] = 1.0
    out, record = synth.degrade(img, PairSpec(height=16, width=16, downsample=2))
    assert record == [{"step": "downsample", "factor": 2}]
    assert np.allclose(out[:, :6], 0) and np.allclose(out[:, 10:], 1)


def test_constant_image_is_fixed_by_every_degradation_but_noise():
    img = np.full((16, 16, 3), 0.6)
    out, record = synth.degrade(img, PairSpec(height=16, width=16, blur_k=3, downsample=4))
    assert np.allclose(out, 0.6, atol=1e-12) and [r["step"] for r in record] == ["blur", "downsample"]


def test_noise_statistics_and_record():
    img = np.full((64, 64, 3), 0.5)
    out, record = synth.degrade(img, PairSpec(noise_sigma=0.05))
    assert record == [{"step": "noise", "sigma": 0.05}]
    assert abs((out - 0.5).std() - 0.05) < 0.003 and abs((out - 0.5).mean()) < 0.003


def test_degradation_record_order():
    _, record = synth.degrade(np.zeros((16, 16, 3)), PairSpec(noise_sigma=0.1, blur_k=3, downsample=2))
    assert [r["step"] for r in record] == ["blur", "downsample", "noise"]


@pytest.mark.parametrize("bad", [dict(blur_k=2), dict(downsample=3), dict(noise_sigma=-1), dict(gain=0),
                                 dict(scene="x"), dict(blur="median"), dict(scale=0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        PairSpec(**bad).validate()


def test_null_pair_is_clean():
    p = synth.make_pair(PairSpec(seed=4))
    assert np.array_equal(p.lq, p.truth.clean)
    assert np.allclose(p.hq, p.truth.clean, atol=1e-12)
    assert np.allclose(p.truth.transform, np.eye(3))


def test_translation_corner_displacement():
    p = synth.make_pair(PairSpec(seed=1, tx=3.0, ty=-2.0))
    err = evalkit.corner_errors(p.truth.transform, np.eye(3), (64, 64))
    assert np.allclose(err.displacements, np.hypot(3, 2))


def test_hq_is_view_of_scene():
    spec = PairSpec(seed=2, rotation_deg=7, scale=1.05, tx=2, ty=1, gain=1.1, bias=-0.02)
    p = synth.make_pair(spec)
    back, mask = geometry.warp(p.hq, np.linalg.inv(p.truth.transform), (64, 64))
    interior = ndimage.binary_erosion(mask, iterations=3)
    predicted = np.clip(1.1 * p.truth.clean - 0.02, 0, 1)
    assert np.abs(back - predicted)[interior].mean() < 0.02


def test_truth_round_trip_within_bilinear_tolerance():
    ys, xs = np.mgrid[0:64, 0:64] / 63.0
    clean = np.stack([0.5 + 0.3 * np.sin(3 * xs), 0.5 + 0.3 * np.cos(2 * ys), xs * ys], axis=-1)
    H = synth.homography_from_spec(PairSpec(rotation_deg=10, scale=0.95, tx=3, ty=-4))
    fwd, _ = geometry.warp(clean, H, (64, 64))
    back, mask = geometry.warp(fwd, np.linalg.inv(H), (64, 64))
    interior = ndimage.binary_erosion(mask, iterations=3)
    assert np.abs(back - clean)[interior].max() <= 0.02


def test_low_coverage_rejected():
    with pytest.raises(synth.CoverageError, match="milder"):
        synth.make_pair(PairSpec(tx=50.0))


def test_corpus_reproducible_by_seed(corpus):
    again = synth.build_corpus(20, 7)
    assert synth.corpus_digest(again) == synth.corpus_digest(corpus)
    assert synth.corpus_digest(synth.build_corpus(20, 8)) != synth.corpus_digest(corpus)


def test_corpus_spec_ranges(corpus):
    for p in corpus:
        s = p.spec
        assert abs(s.rotation_deg) <= 15 and 0.9 <= s.scale <= 1.1
        assert abs(s.tx) <= 5 and abs(s.ty) <= 5 and s.noise_sigma == 0.1
        assert np.linalg.cond(p.truth.transform) < 1e6
        assert np.array_equal(p.lq, synth.quantize(p.lq))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_make_pair_pure(seed):
    spec = synth.random_spec(seed)
    a, b = synth.make_pair(spec), synth.make_pair(spec)
    assert np.array_equal(a.lq, b.lq) and np.array_equal(a.hq, b.hq)
    assert 0 <= a.lq.min() and a.hq.max() <= 1
