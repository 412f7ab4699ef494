"""Restoration and alignment metrics.

PSNR and windowed SSIM (optionally restricted to a mask), control-point
alignment errors between two homographies, the Acceptable classification
and the corpus mAUC (mean of the acceptance-fraction curve).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry

PSNR_CAP = 99.0
ACCEPT_MAE = 50.0
ACCEPT_MEE = 20.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _mask_or_all(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {shape[:2]}")
    return mask


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for peak 1.0 over masked pixels; capped at 99 dB."""
    a, b = _pair(a, b)
    m = _mask_or_all(mask, a.shape)
    if not m.any():
        raise ValueError("psnr over an empty mask")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _ssim_window(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, mask=None, window: int = 8, stride: int = 4, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over ``window``-sized windows (step ``stride``) that touch the mask, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    m = _mask_or_all(mask, a.shape)
    if not m.any():
        raise ValueError("ssim over an empty mask")
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = a.shape[:2]
    if h < window or w < window:
        boxes = [(0, 0, h, w)]
    else:
        ys = list(range(0, h - window + 1, stride))
        xs = list(range(0, w - window + 1, stride))
        boxes = [(y, x, y + window, x + window) for y in ys for x in xs if m[y:y + window, x:x + window].any()]
    per_channel = []
    for c in range(a.shape[2]):
        vals = [_ssim_window(a[y0:y1, x0:x1, c], b[y0:y1, x0:x1, c], c1, c2) for y0, x0, y1, x1 in boxes]
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


@dataclass
class AlignmentErrors:
    displacements: np.ndarray
    mee: float
    mae: float

    @property
    def acceptable(self) -> bool:
        return is_acceptable(self.mae, self.mee)


def is_acceptable(mae: float, mee: float) -> bool:
    return bool(mae < ACCEPT_MAE and mee < ACCEPT_MEE)


def control_points(frame_hw: tuple[int, int], n: int = 5) -> np.ndarray:
    if n < 2:
        raise ValueError("control grid needs n >= 2")
    h, w = frame_hw
    ys, xs = np.meshgrid(np.linspace(0, h - 1, n), np.linspace(0, w - 1, n), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def corner_errors(T_est, T_gt, frame_hw: tuple[int, int], n: int = 5) -> AlignmentErrors:
    """Displacement between the two transforms at an ``n x n`` grid of control points."""
    T_est = geometry.normalize_homography(np.asarray(T_est, dtype=np.float64))
    T_gt = geometry.normalize_homography(np.asarray(T_gt, dtype=np.float64))
    pts = control_points(frame_hw, n)
    d = np.linalg.norm(geometry.apply_homography(T_est, pts) - geometry.apply_homography(T_gt, pts), axis=1)
    return AlignmentErrors(d, float(np.median(d)), float(d.max()))


def mauc(errors, thresholds=None) -> float:
    """100 x mean over thresholds of the fraction of pairs with MAE <= threshold."""
    maes = np.array([e.mae if isinstance(e, AlignmentErrors) else float(e) for e in errors])
    if maes.size == 0:
        raise ValueError("mauc needs at least one pair")
    taus = np.arange(1, 26) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    return float(100.0 * np.mean([(maes <= t).mean() for t in taus]))


# --- reports --------------------------------------------------------------------------------

@dataclass
class PairMetrics:
    pair_id: str
    psnr_baseline: float
    psnr_adapted: float
    ssim_baseline: float
    ssim_adapted: float
    mee_baseline: float
    mae_baseline: float
    mee: float
    mae: float
    acceptable_baseline: bool
    acceptable: bool
    stop_reason: str = ""
    iterations: int = 0


@dataclass
class EvalReport:
    pairs: list[PairMetrics]
    missing: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        if not self.pairs:
            raise ValueError("report has no pairs")
        col = {k: np.array([getattr(p, k) for p in self.pairs], dtype=np.float64)
               for k in ("psnr_baseline", "psnr_adapted", "ssim_baseline", "ssim_adapted",
                         "mae_baseline", "mae", "mee_baseline", "mee")}
        d_psnr = col["psnr_adapted"] - col["psnr_baseline"]
        d_mae = col["mae"] - col["mae_baseline"]
        return {
            "n_pairs": len(self.pairs),
            "auc_construction": "corpus acceptance curve over MAE thresholds 1..25 px",
            "without": {"psnr": col["psnr_baseline"].mean(), "ssim": col["ssim_baseline"].mean(),
                        "mauc": mauc(col["mae_baseline"]),
                        "acceptable": float(np.mean([p.acceptable_baseline for p in self.pairs]))},
            "with": {"psnr": col["psnr_adapted"].mean(), "ssim": col["ssim_adapted"].mean(),
                     "mauc": mauc(col["mae"]),
                     "acceptable": float(np.mean([p.acceptable for p in self.pairs]))},
            "median_delta_psnr": float(np.median(d_psnr)),
            "median_delta_mae": float(np.median(d_mae)),
            "median_mae_reduction": float(np.median(-d_mae / np.maximum(col["mae_baseline"], 1e-12))),
            "pairs_psnr_improved": int((d_psnr > 0).sum()),
            "pairs_mae_improved": int((d_mae < 0).sum()),
            "missing": list(self.missing),
        }

    def to_json(self) -> str:
        body = {"summary": self.summary(), "pairs": [asdict(p) for p in self.pairs]}
        return json.dumps(body, indent=2, sort_keys=True, default=float) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(PairMetrics.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names + ["delta_psnr", "delta_mae"], lineterminator="\n")
        writer.writeheader()
        for p in self.pairs:
            row = asdict(p)
            row["delta_psnr"] = p.psnr_adapted - p.psnr_baseline
            row["delta_mae"] = p.mae - p.mae_baseline
            writer.writerow(row)
        return buf.getvalue()
