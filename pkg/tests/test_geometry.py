import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matres import geometry as g
from matres import tensor as T
from matres.gradcheck import check_function
from matres.tensor import ShapeError, Tensor

FRAME = (64, 64)


def random_homography(rng, strength=1.0):
    angle = np.deg2rad(rng.uniform(-15, 15) * strength)
    s = 1 + rng.uniform(-0.1, 0.1) * strength
    c = np.array([31.5, 31.5])
    A = np.array([[s * np.cos(angle), -s * np.sin(angle), 0], [s * np.sin(angle), s * np.cos(angle), 0], [0, 0, 1]])
    P = np.eye(3)
    P[2, :2] = rng.uniform(-2e-4, 2e-4, 2) * strength
    H = g.translation(*(c + rng.uniform(-5, 5, 2) * strength)) @ P @ A @ g.translation(*-c)
    return g.normalize_homography(H)


def corner_error(H_est, H_true, hw=FRAME):
    corners = g.frame_corners(hw)
    return np.linalg.norm(g.apply_homography(H_est, corners) - g.apply_homography(H_true, corners), axis=1).max()


def outlier_matches(rng, H, n_in=70, n_out=30, min_offset=5.0):
    """Exact inliers of ``H`` plus uniform outliers at least ``min_offset`` px from their true image."""
    src_in = rng.uniform(0, 63, (n_in, 2))
    src_out = rng.uniform(0, 63, (n_out, 2))
    dst_out = rng.uniform(0, 63, (n_out, 2))
    far = np.linalg.norm(dst_out - g.apply_homography(H, src_out), axis=1) > min_offset
    while not far.all():
        dst_out[~far] = rng.uniform(0, 63, ((~far).sum(), 2))
        far = np.linalg.norm(dst_out - g.apply_homography(H, src_out), axis=1) > min_offset
    src = np.vstack([src_in, src_out])
    dst = np.vstack([g.apply_homography(H, src_in), dst_out])
    perm = rng.permutation(len(src))
    return g.MatchSet.from_points(src[perm], dst[perm])


# --- cost volume --------------------------------------------------------------------------

def test_orthonormal_cells_give_identity():
    z = np.eye(4).reshape(4, 2, 2)
    assert np.allclose(g.cost_volume(z, z).matrix, np.eye(4))


def test_antipodal_diagonal(rng):
    z = rng.standard_normal((3, 2, 3))
    assert np.allclose(np.diag(g.cost_volume(z, -z).matrix), -1)


def test_cost_volume_matches_nested_loop_oracle(rng):
    za, zb = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
    C = g.cost_volume(za, zb).matrix
    fa, fb = za.reshape(2, -1), zb.reshape(2, -1)
    for i in range(6):
        for j in range(6):
            a, b = fa[:, i], fb[:, j]
            assert abs(C[i, j] - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))) < 1e-10


def test_cost_volume_transpose_symmetry(rng):
    za, zb = rng.standard_normal((5, 3, 4)), rng.standard_normal((5, 3, 4))
    assert np.abs(g.cost_volume(za, zb).matrix - g.cost_volume(zb, za).matrix.T).max() < 1e-10


def test_cost_volume_flags_zero_cells(rng):
    za = rng.standard_normal((3, 2, 2))
    za[:, 0, 1] = 0
    cv = g.cost_volume(za, rng.standard_normal((3, 2, 2)))
    assert list(cv.degenerate_src) == [1] and len(cv.degenerate_tgt) == 0
    assert np.all(cv.matrix[1] == 0) and np.all(np.isfinite(cv.matrix))
    with pytest.raises(ShapeError):
        g.cost_volume(za, np.ones((3, 2, 3)))


def test_minmax_examples():
    C = np.array([2.0, 3.0, 4.0, 5.0, 6.0])
    assert g.minmax_norm(C)[2] == pytest.approx(0.5, abs=1e-8)
    assert np.all(g.minmax_norm(np.full((3, 3), 0.7)) == 0)
    top = g.minmax_norm(C, eps=1e-3).max()
    assert top == 4 / (4 + 1e-3) and top < 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_minmax_range_property(n, seed, scale):
    C = np.random.default_rng(seed).standard_normal((n, n)) * scale
    out = g.minmax_norm(C)
    assert out.min() >= 0 and out.max() < 1


# --- matching -----------------------------------------------------------------------------

def test_mutual_matches_identity_and_permutation(rng):
    m = g.mutual_matches(np.eye(6), (2, 3))
    assert np.array_equal(m.src_index, np.arange(6)) and np.array_equal(m.dst_index, np.arange(6))
    perm = rng.permutation(6)
    P = np.zeros((6, 6))
    P[np.arange(6), perm] = 1
    m = g.mutual_matches(P, (2, 3))
    assert np.array_equal(m.dst_index, perm[m.src_index]) and len(m) == 6


def test_mutual_matches_brute_force(rng):
    for _ in range(20):
        C = rng.standard_normal((6, 6))
        oracle = [(i, j) for i in range(6) for j in range(6)
                  if C[i, j] == C[i].max() and C[i, j] == C[:, j].max()]
        m = g.mutual_matches(C, (2, 3))
        assert list(zip(m.src_index.tolist(), m.dst_index.tolist())) == oracle


def test_match_coordinates_use_cell_centres():
    m = g.mutual_matches(np.eye(4), (2, 2), stride=4)
    assert np.allclose(m.src, [[1.5, 1.5], [5.5, 1.5], [1.5, 5.5], [5.5, 5.5]])
    with pytest.raises(ShapeError):
        g.mutual_matches(np.ones((2, 3)), (1, 2))


def test_refinement_recovers_subcell_peak():
    # a smooth bump centred between grid cells
    gh = gw = 5
    centers = g.cell_centers((gh, gw), 1)
    true = np.array([2.3, 1.8])
    row = -np.sum((centers - true) ** 2, axis=1)
    C = np.tile(row, (gh * gw, 1))
    C[np.arange(gh * gw), np.arange(gh * gw)] = -100
    C[12] = row
    m = g.MatchSet(centers[[12]], centers[[int(row.argmax())]], np.ones(1), np.array([12]), np.array([row.argmax()]))
    refined = g.refine_matches(C, m, (gh, gw), 1)
    assert np.allclose(refined.dst[0], true)


# --- homography fitting -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_four_exact_points_recover_homography(seed):
    rng = np.random.default_rng(seed)
    H = random_homography(rng)
    src = np.array([[3.0, 5.0], [60.0, 2.0], [58.0, 61.0], [4.0, 57.0]])
    H_est = g.fit_homography(g.MatchSet.from_points(src, g.apply_homography(H, src)))
    assert corner_error(H_est, H) < 1e-6
    assert np.allclose(H_est, H, atol=1e-8)


def test_identity_correspondences():
    pts = g.cell_centers((4, 4), 4)
    assert np.allclose(g.fit_homography(g.MatchSet.from_points(pts, pts)), np.eye(3), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_ransac_with_thirty_percent_outliers(seed):
    rng = np.random.default_rng(100 + seed)
    H = random_homography(rng)
    H_est = g.fit_homography(outlier_matches(rng, H), g.RansacConfig(seed=seed))
    assert corner_error(H_est, H) < 0.5


def test_ransac_deterministic_given_seed(rng):
    H = random_homography(rng)
    m = outlier_matches(rng, H, n_in=30, n_out=20)
    a = g.ransac_homography(m, g.RansacConfig(seed=3))
    b = g.ransac_homography(m, g.RansacConfig(seed=3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_fit_errors():
    with pytest.raises(g.InsufficientMatchesError):
        g.fit_homography(g.MatchSet.from_points(np.zeros((3, 2)), np.zeros((3, 2))))
    line = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=1)
    with pytest.raises(g.DegenerateConfigurationError, match="collinear"):
        g.dlt(line, line + 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_dlt_exact_on_noiseless_general_position(seed):
    rng = np.random.default_rng(seed)
    H = random_homography(rng)
    src = rng.uniform(0, 63, (12, 2))
    assert corner_error(g.dlt(src, g.apply_homography(H, src)), H) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10), st.integers(0, 1000))
def test_normalize_is_scale_invariant(scale, seed):
    H = random_homography(np.random.default_rng(seed))
    assert np.allclose(g.normalize_homography(H * scale), H, atol=1e-10)


def test_singular_transform_rejected():
    with pytest.raises(g.SingularTransformError):
        g.normalize_homography(np.zeros((3, 3)) + np.eye(3)[2:].T @ np.eye(3)[2:])
    with pytest.raises(g.SingularTransformError):
        g.warp(np.zeros((4, 4, 3)), np.diag([1.0, 0.0, 1.0]), (4, 4))


# --- warping ------------------------------------------------------------------------------

def test_identity_warp_is_exact(rng):
    img = rng.random((64, 64, 3))
    out, mask = g.warp(img, np.eye(3), FRAME)
    assert np.array_equal(out, img) and mask.all()


def test_integer_translation_matches_index_shift():
    img = np.random.default_rng(0).random((64, 64, 3))
    out, mask = g.warp(img, g.translation(3, 4), FRAME)
    oracle = np.zeros_like(img)
    oracle[4:, 3:] = img[:-4, :-3]
    expected_mask = np.zeros(FRAME, dtype=bool)
    expected_mask[4:, 3:] = True
    assert np.array_equal(mask, expected_mask)
    assert np.array_equal(out[mask], oracle[mask])
    assert np.all(out[~mask] == 0)


def test_round_trip_on_smooth_image():
    ys, xs = np.mgrid[0:64, 0:64] / 63.0
    img = np.stack([0.5 + 0.4 * np.sin(2 * xs + ys), xs * ys, 0.5 + 0.3 * np.cos(3 * ys)], axis=-1)
    H = random_homography(np.random.default_rng(7))
    fwd, _ = g.warp(img, H, FRAME)
    back, mask = g.warp(fwd, np.linalg.inv(H), FRAME)
    interior = mask & g.valid_mask(H, FRAME, FRAME)[..., None].all(axis=-1)
    from scipy import ndimage

    interior = ndimage.binary_erosion(mask, iterations=3)
    assert np.abs(back - img)[interior].max() <= 0.02


def test_mask_depends_only_on_geometry(rng):
    H = random_homography(rng)
    _, m1 = g.warp(rng.random((64, 64, 3)), H, FRAME)
    _, m2 = g.warp(np.zeros((64, 64, 3)), H, FRAME)
    assert np.array_equal(m1, m2)


def test_warp_feature_layout(rng):
    z = rng.standard_normal((5, 8, 8))
    out, mask = g.warp(z, g.translation(1, 0), (8, 8), layout="chw")
    assert out.shape == (5, 8, 8)
    assert np.allclose(out[:, :, 1:], z[:, :, :-1]) and not mask[:, 0].any()


def test_warp_gradient_interior():
    H = g.normalize_homography(g.translation(0.37, -0.61) @ np.array([[1.02, 0.03, 0], [-0.02, 0.99, 0], [0, 0, 1]]))
    err = check_function(lambda x: g.warp(x, H, (8, 8), layout="chw")[0], [np.random.default_rng(2).random((2, 8, 8))])
    assert err < 1e-4


# --- estimation ---------------------------------------------------------------------------

def test_self_match_identity(rng):
    z = rng.standard_normal((16, 6, 6))
    H, info = g.estimate_transform(z, z, 4)
    assert np.allclose(H, np.eye(3), atol=1e-9) and not info.fallback


def test_planted_feature_translation(rng):
    big = rng.standard_normal((16, 10, 10))
    za, zb = big[:, 0:8, 0:8], big[:, 2:10, 1:9]
    H, _ = g.estimate_transform(za, zb, 4)
    # cell (r, c) of za is cell (r-2, c-1) of zb
    assert np.allclose(H, g.translation(-4, -8), atol=1e-6)


def test_constant_features_fall_back_to_identity():
    z = np.ones((4, 5, 5))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        H, info = g.estimate_transform(z, z, 4)
    assert info.fallback and np.array_equal(H, np.eye(3))
    assert any("identity" in str(w.message) for w in caught)


def test_feature_frame_conjugation():
    H = g.translation(8, 4)
    Hf = g.to_feature_frame(H, 4)
    assert np.allclose(Hf, g.translation(2, 1))
    assert np.allclose(g.stride_matrix(4) @ [0, 0, 1], [1.5, 1.5, 1])
