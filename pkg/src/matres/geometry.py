"""Cost volumes, mutual nearest-neighbour matching, robust homography fitting
and inverse-mapping warps.

Coordinates: pixel centres sit at integer positions with the origin at the
top-left; a homography acts on homogeneous ``(x, y, 1)`` with ``x`` the column.
A feature cell ``(row, col)`` at stride ``s`` is centred on pixel
``(s*col + (s-1)/2, s*row + (s-1)/2)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class DegenerateConfigurationError(ValueError):
    pass


class InsufficientMatchesError(ValueError):
    pass


class SingularTransformError(ValueError):
    pass


# --- homogeneous helpers -------------------------------------------------------

def normalize_homography(H: np.ndarray) -> np.ndarray:
    """Scale so the bottom-right entry is 1 and verify invertibility."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ShapeError("homography", f"expected 3x3, got {H.shape}")
    if abs(H[2, 2]) < 1e-12:
        raise SingularTransformError("homography has a zero bottom-right entry")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-12:
        raise SingularTransformError(f"homography is singular (det={np.linalg.det(H):.3e})")
    return H


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    homo = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ np.asarray(H, dtype=np.float64).T
    return homo[..., :2] / homo[..., 2:3]


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def stride_matrix(stride: int) -> np.ndarray:
    """Maps feature-cell coordinates to the pixel coordinates of the cell centre."""
    off = (stride - 1) / 2
    return np.array([[stride, 0.0, off], [0.0, stride, off], [0.0, 0.0, 1.0]])


def to_feature_frame(H: np.ndarray, stride: int) -> np.ndarray:
    S = stride_matrix(stride)
    return np.linalg.inv(S) @ H @ S


def cell_centers(grid_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Pixel-space ``(x, y)`` centres of a feature grid, row-major."""
    gh, gw = grid_hw
    rows, cols = np.mgrid[0:gh, 0:gw]
    off = (stride - 1) / 2
    return np.stack([cols.ravel() * stride + off, rows.ravel() * stride + off], axis=1).astype(np.float64)


def cell_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """True for every feature cell that contains at least one valid pixel."""
    h, w = mask.shape
    gh, gw = -(-h // stride), -(-w // stride)
    padded = np.zeros((gh * stride, gw * stride), dtype=bool)
    padded[:h, :w] = mask
    return padded.reshape(gh, stride, gw, stride).any(axis=(1, 3))


def frame_corners(hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


# --- cost volume ---------------------------------------------------------------------

@dataclass
class CostVolume:
    matrix: np.ndarray
    degenerate_src: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    degenerate_tgt: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def flatten_normalize(z) -> Tensor:
    """``(C, H, W)`` -> ``(C, H*W)`` with unit-norm columns (zero columns stay zero)."""
    z = T.as_tensor(z)
    if z.ndim != 3:
        raise ShapeError("cost_volume", f"feature map must be (C, H, W), got {z.shape}")
    c = z.shape[0]
    return T.l2_normalize(T.reshape(z, (c, -1)), axis=0)


def cost_matrix(za, zb, cells: np.ndarray | None = None) -> Tensor:
    """Differentiable cosine-similarity matrix ``norm(za)^T norm(zb)``.

    ``cells`` optionally restricts both sides to a subset of flattened cell
    indices (the same subset on each side, so the diagonal stays aligned).
    """
    za, zb = T.as_tensor(za), T.as_tensor(zb)
    if za.shape != zb.shape:
        raise ShapeError("cost_volume", f"feature maps differ: {za.shape} vs {zb.shape}")
    fa, fb = flatten_normalize(za), flatten_normalize(zb)
    if cells is not None:
        fa = T.take(fa, (slice(None), cells))
        fb = T.take(fb, (slice(None), cells))
    return T.matmul(T.transpose(fa), fb)


def cost_volume(za, zb) -> CostVolume:
    za = za.data if isinstance(za, Tensor) else np.asarray(za)
    zb = zb.data if isinstance(zb, Tensor) else np.asarray(zb)
    matrix = cost_matrix(Tensor(za), Tensor(zb)).data
    dead_a = np.flatnonzero(np.linalg.norm(za.reshape(za.shape[0], -1), axis=0) == 0)
    dead_b = np.flatnonzero(np.linalg.norm(zb.reshape(zb.shape[0], -1), axis=0) == 0)
    return CostVolume(matrix, dead_a, dead_b)


def minmax_norm(C, eps: float = 1e-8):
    """``(C - min C) / (max C - min C + eps)``; Tensor in, Tensor out."""
    if isinstance(C, CostVolume):
        C = C.matrix
    if isinstance(C, Tensor):
        lo = T.tmin(C)
        return T.div(T.sub(C, lo), T.add(T.sub(T.tmax(C), lo), eps))
    C = np.asarray(C, dtype=np.float64)
    lo = C.min()
    return (C - lo) / (C.max() - lo + eps)


# --- matching --------------------------------------------------------------------------

@dataclass
class MatchSet:
    src: np.ndarray  # (N, 2) pixel x, y
    dst: np.ndarray
    score: np.ndarray
    src_index: np.ndarray
    dst_index: np.ndarray

    def __len__(self) -> int:
        return len(self.score)

    @classmethod
    def from_points(cls, src, dst, score=None) -> MatchSet:
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        n = len(src)
        score = np.ones(n) if score is None else np.asarray(score, dtype=np.float64)
        return cls(src, dst, score, np.arange(n), np.arange(n))


def mutual_matches(C, grid_shape: tuple[int, int], stride: int = 1) -> MatchSet:
    """Pairs ``(i, j)`` with ``j = argmax C[i, :]`` and ``i = argmax C[:, j]``."""
    if isinstance(C, CostVolume):
        C = C.matrix
    C = np.asarray(C)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError("mutual_matches", f"cost volume must be square, got {C.shape}")
    best_col = C.argmax(axis=1)
    best_row = C.argmax(axis=0)
    src_idx = np.flatnonzero(best_row[best_col] == np.arange(C.shape[0]))
    dst_idx = best_col[src_idx]
    centers = cell_centers(grid_shape, stride)
    return MatchSet(centers[src_idx], centers[dst_idx], C[src_idx, dst_idx], src_idx, dst_idx)


def refine_matches(C, matches: MatchSet, grid_shape: tuple[int, int], stride: int = 1) -> MatchSet:
    """Sub-cell target positions from a parabola through each match's cost-row peak.

    Along each axis the offset is ``(l - r) / (2 (l - 2c + r))`` for neighbours
    ``l, r`` around the peak ``c``, clipped to half a cell; border peaks and
    non-concave neighbourhoods keep the cell centre.
    """
    if isinstance(C, CostVolume):
        C = C.matrix
    C = np.asarray(C, dtype=np.float64)
    gh, gw = grid_shape
    rows, cols = np.divmod(matches.dst_index, gw)
    peak = C[matches.src_index, matches.dst_index]
    dst = matches.dst.copy()
    for axis, (pos, size, step) in enumerate(((cols, gw, 1), (rows, gh, gw))):
        inner = (pos > 0) & (pos < size - 1)
        lo = np.where(inner, matches.dst_index - step, matches.dst_index)
        hi = np.where(inner, matches.dst_index + step, matches.dst_index)
        left, right = C[matches.src_index, lo], C[matches.src_index, hi]
        curv = left - 2 * peak + right
        ok = inner & (curv < 0)
        offset = np.where(ok, 0.5 * (left - right) / np.where(ok, curv, -1.0), 0.0)
        dst[:, axis] += stride * np.clip(offset, -0.5, 0.5)
    return MatchSet(matches.src, dst, matches.score, matches.src_index, matches.dst_index)


# --- homography fitting ----------------------------------------------------------------

@dataclass
class RansacConfig:
    iterations: int = 500
    threshold: float = 2.0
    seed: int = 0
    refits: int = 3


def _hartley(pts: np.ndarray) -> np.ndarray:
    mean = pts.mean(axis=0)
    spread = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / spread if spread > 0 else 1.0
    return np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])


def _design_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stacked DLT rows; works on ``(..., N, 2)`` arrays."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zero, one = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _is_collinear(pts: np.ndarray) -> bool:
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return len(s) < 2 or s[1] <= 1e-9 * max(s[0], 1.0)


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform on >= 4 correspondences."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise InsufficientMatchesError(f"need at least 4 correspondences, got {len(src)}")
    if _is_collinear(src) or _is_collinear(dst):
        raise DegenerateConfigurationError("correspondences are collinear; homography is undetermined")
    Ts, Td = _hartley(src), _hartley(dst)
    A = _design_rows(apply_homography(Ts, src), apply_homography(Td, dst))
    _, _, vh = np.linalg.svd(A)
    Hn = vh[-1].reshape(3, 3)
    return normalize_homography(np.linalg.inv(Td) @ Hn @ Ts)


def _transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    homo = np.concatenate([src, np.ones(src.shape[:-1] + (1,))], axis=-1) @ np.swapaxes(H, -1, -2)
    w = homo[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = homo[..., :2] / w[..., None]
        err = np.linalg.norm(proj - dst, axis=-1)
    return np.where(np.isfinite(err) & (np.abs(w) > 1e-12), err, np.inf)


def _triangle_areas(pts: np.ndarray) -> np.ndarray:
    """Areas of the four triangles of each 4-point sample, shape (K, 4)."""
    areas = []
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        d1 = pts[:, b] - pts[:, a]
        d2 = pts[:, c] - pts[:, a]
        areas.append(0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]))
    return np.stack(areas, axis=1)


def ransac_homography(matches: MatchSet, config: RansacConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC over minimal 4-point DLT solves, then normalized-DLT refits on the consensus.

    Returns the homography and the boolean inlier mask.
    """
    cfg = config or RansacConfig()
    src, dst = matches.src, matches.dst
    n = len(src)
    if n < 4:
        raise InsufficientMatchesError(f"need at least 4 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    samples = np.argsort(rng.random((cfg.iterations, n)), axis=1)[:, :4]
    extent = max(np.ptp(src, axis=0).max(), np.ptp(dst, axis=0).max(), 1.0)
    min_area = 1e-6 * extent ** 2
    ok = (_triangle_areas(src[samples]) > min_area).all(axis=1) & (_triangle_areas(dst[samples]) > min_area).all(axis=1)
    best_inliers = None
    if ok.any():
        samples = samples[ok]
        Ts, Td = _hartley(src), _hartley(dst)
        ns, nd = apply_homography(Ts, src), apply_homography(Td, dst)
        A = _design_rows(ns[samples], nd[samples])  # (K, 8, 9)
        _, _, vh = np.linalg.svd(A)
        Hn = vh[:, -1].reshape(-1, 3, 3)
        Hs = np.linalg.inv(Td)[None] @ Hn @ Ts[None]
        errors = _transfer_error(Hs, src[None], dst[None])  # (K, N)
        counts = (errors < cfg.threshold).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] >= 4:
            best_inliers = errors[k] < cfg.threshold
    if best_inliers is None:
        # no consensus: plain least squares on everything
        return dlt(src, dst), np.ones(n, dtype=bool)
    inliers = best_inliers
    H = dlt(src[inliers], dst[inliers])
    for _ in range(cfg.refits):
        refreshed = _transfer_error(H, src, dst) < cfg.threshold
        if refreshed.sum() < 4 or np.array_equal(refreshed, inliers):
            break
        inliers = refreshed
        H = dlt(src[inliers], dst[inliers])
    return H, inliers


def fit_homography(matches: MatchSet, config: RansacConfig | None = None) -> np.ndarray:
    return ransac_homography(matches, config)[0]


# --- warping ---------------------------------------------------------------------------

def _source_coords(H: np.ndarray, out_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    H = normalize_homography(H)
    inv = np.linalg.inv(H)
    oh, ow = out_hw
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    homo = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ inv.T
    w = homo[..., 2]
    ahead = w > 1e-12
    safe = np.where(ahead, w, 1.0)
    return homo[..., 1] / safe, homo[..., 0] / safe, ahead


def valid_mask(H: np.ndarray, src_hw: tuple[int, int], out_hw: tuple[int, int], tol: float = 1e-6) -> np.ndarray:
    """Target pixels whose inverse-mapped location lies inside the source frame."""
    sy, sx, ahead = _source_coords(H, out_hw)
    h, w = src_hw
    return ahead & (sx >= -tol) & (sx <= w - 1 + tol) & (sy >= -tol) & (sy <= h - 1 + tol)


def warp(source, H: np.ndarray, out_hw: tuple[int, int], layout: str = "hwc"):
    """Inverse-mapping bilinear warp of ``source`` by ``H`` onto an ``out_hw`` grid.

    ``layout`` is ``"hwc"`` for images and ``"chw"`` for feature maps.  Returns
    ``(warped, mask)``; ``warped`` is a Tensor when ``source`` is one, so
    gradients reach the source values.
    """
    is_tensor = isinstance(source, Tensor)
    src = source if is_tensor else Tensor(np.asarray(source))
    flat = src.ndim == 2
    if flat:
        src = T.reshape(src, src.shape + (1,)) if layout == "hwc" else T.reshape(src, (1,) + src.shape)
    if layout == "hwc":
        chw = T.transpose(src, (2, 0, 1))
    elif layout == "chw":
        chw = src
    else:
        raise ValueError(f"layout must be 'hwc' or 'chw', got {layout!r}")
    sy, sx, ahead = _source_coords(H, out_hw)
    mask = valid_mask(H, chw.shape[-2:], out_hw)
    sy = np.where(ahead, sy, -1e9)
    out = T.grid_sample(chw, sy, sx)
    if layout == "hwc":
        out = T.transpose(out, (1, 2, 0))
    if flat:
        out = T.reshape(out, out_hw)
    return (out if is_tensor else out.data), mask


# --- transform estimation ----------------------------------------------------------------

@dataclass
class EstimateInfo:
    n_matches: int
    n_inliers: int
    fallback: bool = False
    reason: str = ""


def estimate_transform(z_src, z_tgt, stride: int, config: RansacConfig | None = None, refine: bool = False
                       ) -> tuple[np.ndarray, EstimateInfo]:
    """Cost volume -> mutual matches -> RANSAC homography, in pixel coordinates.

    With ``refine`` the match targets get sub-cell positions first.

    Falls back to the identity (with ``info.fallback`` set and a warning) when
    matching or fitting fails.
    """
    za = z_src.data if isinstance(z_src, Tensor) else np.asarray(z_src)
    zb = z_tgt.data if isinstance(z_tgt, Tensor) else np.asarray(z_tgt)
    if za.shape != zb.shape:
        raise ShapeError("estimate_transform", f"feature maps differ: {za.shape} vs {zb.shape}")
    cv = cost_volume(za, zb)
    matches = mutual_matches(cv, za.shape[-2:], stride)
    if refine:
        matches = refine_matches(cv, matches, za.shape[-2:], stride)
    try:
        H, inliers = ransac_homography(matches, config)
        return H, EstimateInfo(len(matches), int(inliers.sum()))
    except (InsufficientMatchesError, DegenerateConfigurationError, SingularTransformError) as exc:
        warnings.warn(f"transform estimation fell back to identity: {exc}", RuntimeWarning, stacklevel=2)
        return np.eye(3), EstimateInfo(len(matches), 0, fallback=True, reason=str(exc))
