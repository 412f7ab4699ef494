"""Per-pair test-time adaptation of the injection module.

Each iteration estimates the LQ->HQ homography from matcher features, warps
the LQ image (and its features) into the HQ frame, restores it with adapter
modulation, and scores the result by how diagonal the normalised cost volume
between the restored and the reference features is, plus a masked pixel
term.  Only the adapter is updated.  With feedback on, the restored image,
mapped back to the LQ frame, becomes the matcher's input for the next pass.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import adapter as adapter_mod
from . import geometry
from . import tensor as T
from .adapter import AdapterState, init_adapter
from .optim import AdamW
from .priors import PriorBackbone, extract_prior
from .restorer import Restorer
from .tensor import ShapeError, Tensor


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss turns NaN/inf; carries a dump of the iteration state."""

    def __init__(self, iteration: int, dump: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {json.dumps(dump, default=str)}")
        self.iteration = iteration
        self.dump = dump


class GradientLeakError(AssertionError):
    """A frozen weight showed up in the gradient map."""


@dataclass
class AdaptConfig:
    lambda_p: float = 0.1
    eps_norm: float = 1e-8
    t_max: int = 100
    plateau_window: int = 5
    plateau_delta: float = 1e-3
    stop_on_plateau: bool = True
    lr: float = 1e-3
    lr_halving: int = 10
    weight_decay: float = 0.01
    feedback: bool = True
    rank: int = 4
    adapter_seed: int = 0
    adapter_init_scale: float = 1.0
    ransac_iterations: int = 500
    ransac_threshold: float = 3.0
    ransac_seed: int = 0
    refine_matches: bool = True

    def validate(self) -> AdaptConfig:
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not 0 < self.plateau_delta < 1:
            raise ValueError("plateau_delta must lie in (0, 1)")
        if self.plateau_window < 1:
            raise ValueError("plateau_window must be >= 1")
        if self.lambda_p < 0:
            raise ValueError("lambda_p must be >= 0")
        if self.lr <= 0 or self.lr_halving < 1:
            raise ValueError("lr must be positive and lr_halving >= 1")
        return self

    def ransac(self) -> geometry.RansacConfig:
        return geometry.RansacConfig(self.ransac_iterations, self.ransac_threshold, self.ransac_seed)


@dataclass
class TraceRow:
    iteration: int
    l_d: float
    l_p: float
    l_total: float
    lr: float
    seconds: float
    n_matches: int
    n_inliers: int
    fallback: bool


@dataclass
class LossTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, with_time: bool = True) -> str:
        names = [f for f in TraceRow.__dataclass_fields__ if with_time or f != "seconds"]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            row = asdict(r)
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in names})
        return buf.getvalue()


@dataclass
class AdaptResult:
    transform: np.ndarray
    restored: np.ndarray
    mask: np.ndarray
    adapter: AdapterState
    trace: LossTrace
    stop_reason: str
    initial_transform: np.ndarray
    initial_restored: np.ndarray
    initial_mask: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.trace)


# --- losses ------------------------------------------------------------------------------

def off_diagonal_loss(c_norm) -> Tensor:
    """L1 mass of the matrix with its diagonal removed."""
    c = T.as_tensor(c_norm)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError("off_diagonal_loss", f"cost volume must be square, got {c.shape}")
    off = 1.0 - np.eye(c.shape[0], dtype=c.dtype)
    return T.tsum(T.tabs(T.mul(c, off)))


def pixel_loss(eq, hq, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked pixels and all channels; 0 (with a warning) for an empty mask."""
    eq = T.as_tensor(eq)
    hq = np.asarray(hq.data if isinstance(hq, Tensor) else hq, dtype=eq.dtype)
    if eq.shape != hq.shape or np.shape(mask) != eq.shape[:2]:
        raise ShapeError("pixel_loss", f"eq {eq.shape}, hq {hq.shape}, mask {np.shape(mask)}")
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum()) * eq.shape[2]
    if count == 0:
        warnings.warn("pixel loss over an empty mask is defined as 0", RuntimeWarning, stacklevel=2)
        return T.mul(T.tsum(eq), 0.0)
    weight = np.broadcast_to(mask[..., None], eq.shape).astype(eq.dtype)
    sq = T.square(T.sub(eq, hq))
    return T.mul(T.tsum(T.mul(sq, weight)), 1.0 / count)


def total_loss(l_d, l_p, lambda_p: float):
    if isinstance(l_d, Tensor) or isinstance(l_p, Tensor):
        return T.add(l_d, T.mul(l_p, lambda_p))
    return l_d + lambda_p * l_p


def plateau_check(values, window: int, delta: float) -> bool:
    """True when the best of the last ``window`` values improves on the best before them
    by less than ``delta`` relative to that earlier best."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    if len(values) <= window:
        return False
    prior_best = values[:-window].min()
    recent_best = values[-window:].min()
    return bool(prior_best - recent_best < delta * (prior_best + 1e-12))


def lr_at(iteration: int, lr0: float, every: int = 10) -> float:
    return lr0 * 2.0 ** (-(iteration // every))


# --- the loop ---------------------------------------------------------------------------

@dataclass
class _Pass:
    transform: np.ndarray
    info: geometry.EstimateInfo
    warped_lq: np.ndarray
    mask: np.ndarray
    restored: Tensor
    l_d: Tensor
    l_p: Tensor
    l_total: Tensor


def _forward(lq: np.ndarray, lq_input: np.ndarray, hq: np.ndarray, z_hq: np.ndarray, matcher: PriorBackbone,
             restorer: Restorer, state: AdapterState | None, cfg: AdaptConfig) -> _Pass:
    """One pipeline pass.  ``state=None`` runs the adapter-free pipeline."""
    s_z = matcher.s_z
    z_lq = extract_prior(matcher, lq_input, "source").data
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        H, info = geometry.estimate_transform(z_lq, z_hq, s_z, cfg.ransac(), cfg.refine_matches)
    hw = hq.shape[:2]
    warped_lq, mask = geometry.warp(lq, H, hw)
    if state is None:
        restored = restorer.restore(warped_lq, hq)
    else:
        z_lq_w, _ = geometry.warp(z_lq, geometry.to_feature_frame(H, s_z), z_hq.shape[1:], layout="chw")
        grid = restorer.feature_shape(hw)[1:]
        restored = restorer.restore(warped_lq, hq, adapter_mod.apply(state, z_lq_w, grid),
                                    adapter_mod.apply(state, z_hq, grid))
    z_eq = extract_prior(matcher, restored, "source")
    cells = np.flatnonzero(geometry.cell_mask(mask, s_z).ravel())
    c_norm = geometry.minmax_norm(geometry.cost_matrix(z_eq, z_hq, cells), cfg.eps_norm)
    l_d = off_diagonal_loss(c_norm)
    l_p = pixel_loss(restored, hq, mask)
    return _Pass(H, info, warped_lq, mask, restored, l_d, l_p, total_loss(l_d, l_p, cfg.lambda_p))


def feedback_image(lq: np.ndarray, restored: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Map the restored HQ-frame image back to the LQ frame; keep the original LQ outside its support."""
    back, valid = geometry.warp(restored, np.linalg.inv(H), lq.shape[:2])
    return np.where(valid[..., None], back, lq).astype(lq.dtype)


def prepare_inputs(lq: np.ndarray, hq: np.ndarray, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    dtype = dtype or T.get_default_dtype()
    lq, hq = np.asarray(lq, dtype=dtype), np.asarray(hq, dtype=dtype)
    if lq.ndim != 3 or hq.ndim != 3 or lq.shape[2] != hq.shape[2]:
        raise ShapeError("adapt", f"images must be (H, W, C) with equal C, got {lq.shape} and {hq.shape}")
    if lq.shape != hq.shape:
        lq = T.bilinear_resize(Tensor(lq.transpose(2, 0, 1)), hq.shape[:2]).data.transpose(1, 2, 0)
    return np.ascontiguousarray(lq), hq


def baseline(lq: np.ndarray, hq: np.ndarray, matcher: PriorBackbone, restorer: Restorer,
             config: AdaptConfig | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adapter-free pipeline: matcher on the raw LQ image, restorer without injections."""
    cfg = (config or AdaptConfig()).validate()
    lq, hq = prepare_inputs(lq, hq)
    z_hq = extract_prior(matcher, hq, "reference").data
    p = _forward(lq, lq, hq, z_hq, matcher, restorer, None, cfg)
    return p.transform, p.restored.data, p.mask


def adapt(lq: np.ndarray, hq: np.ndarray, matcher: PriorBackbone, restorer: Restorer,
          config: AdaptConfig | None = None, grad_hook: Callable[[int, dict], dict] | None = None,
          state: AdapterState | None = None) -> AdaptResult:
    """Run the adaptation loop on one LQ/HQ pair.

    ``grad_hook(iteration, grads)`` may rewrite the gradient map before the
    optimizer step (used to plant plateaus in tests).
    """
    cfg = (config or AdaptConfig()).validate()
    lq, hq = prepare_inputs(lq, hq)
    frozen_before = (matcher.params.digest(), restorer.params.digest())
    if state is None:
        state = init_adapter(matcher.c_z, restorer.c_r, cfg.rank, cfg.adapter_seed, matcher.s_z, restorer.s_r,
                             cfg.adapter_init_scale)
    opt = AdamW(state.params.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    state.optimizer = opt
    expected = state.names()

    z_hq = extract_prior(matcher, hq, "reference").data
    lq_input = lq
    trace = LossTrace()
    first = last = None
    stop_reason = "cap"
    for it in range(cfg.t_max):
        start = time.perf_counter()
        opt.lr = lr_at(it, cfg.lr, cfg.lr_halving)
        p = _forward(lq, lq_input, hq, z_hq, matcher, restorer, state, cfg)
        values = (float(p.l_d.data), float(p.l_p.data), float(p.l_total.data))
        if not np.all(np.isfinite(values)):
            raise NonFiniteLossError(it, {
                "l_d": values[0], "l_p": values[1], "l_total": values[2], "lr": opt.lr,
                "transform": p.transform.tolist(), "matches": p.info.n_matches,
                "adapter_norms": {q.name: float(np.linalg.norm(q.data)) for q in state.params},
                "restored_finite": bool(np.isfinite(p.restored.data).all()),
            })
        grads = T.backward(p.l_total)
        if set(grads) != expected:
            raise GradientLeakError(f"gradient map keys {sorted(grads)} differ from adapter {sorted(expected)}")
        if grad_hook is not None:
            grads = grad_hook(it, grads)
        opt.step(grads)
        trace.rows.append(TraceRow(it, values[0], values[1], values[2], opt.lr, time.perf_counter() - start,
                                   p.info.n_matches, p.info.n_inliers, p.info.fallback))
        if first is None:
            first = p
        last = p
        if cfg.feedback:
            lq_input = feedback_image(lq, p.restored.data, p.transform)
        if cfg.stop_on_plateau and plateau_check(trace.column("l_d"), cfg.plateau_window, cfg.plateau_delta):
            stop_reason = "plateau"
            break

    if (matcher.params.digest(), restorer.params.digest()) != frozen_before:
        raise GradientLeakError("frozen matcher or restorer weights changed during adaptation")
    return AdaptResult(last.transform, last.restored.data, last.mask, state, trace, stop_reason,
                       first.transform, first.restored.data, first.mask)


# --- end-to-end gradient check --------------------------------------------------------------

def end_to_end_gradcheck(seed: int = 0, size: int = 16, tol: float = 1e-4, h: float = 1e-6):
    """Finite-difference check of dL_total/d(adapter) through the whole pipeline.

    Runs at 64-bit precision with freshly initialised networks on a small
    synthetic pair.  The transform estimate does not depend on the adapter
    within one pass, so the loss is smooth in the adapter weights away from
    ReLU/clamp/min/max kinks; the small step keeps perturbations off them.
    """
    from . import synth
    from .gradcheck import GradResult, numeric_grad, relative_error
    from .priors import init_backbone
    from .restorer import init_restorer

    with T.default_dtype(np.float64):
        spec = synth.PairSpec(seed=seed, height=size, width=size, rotation_deg=4.0, tx=1.0, ty=-1.0,
                              noise_sigma=0.05)
        pair = synth.make_pair(spec, "gradcheck", quantize_8bit=False)
        matcher = init_backbone("diffusion", seed)
        restorer = init_restorer(seed)
        cfg = AdaptConfig().validate()
        state = init_adapter(matcher.c_z, restorer.c_r, cfg.rank, seed, matcher.s_z, restorer.s_r)
        state.up.data[...] = np.random.default_rng([seed, 17]).standard_normal(state.up.shape) * 0.1
        lq, hq = prepare_inputs(pair.lq, pair.hq)
        z_hq = extract_prior(matcher, hq, "reference").data

        def loss() -> Tensor:
            return _forward(lq, lq, hq, z_hq, matcher, restorer, state, cfg).l_total

        grads = T.backward(loss())
        worst = 0.0
        for p in state.params:
            numeric = numeric_grad(lambda: float(loss().data), p.data, h)
            worst = max(worst, relative_error(np.asarray(grads[p.name]), numeric))
    return GradResult("adapter_end_to_end", seed, worst, worst <= tol)
