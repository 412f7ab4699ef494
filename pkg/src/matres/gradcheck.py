"""Central finite-difference checks for every differentiable primitive."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, default_dtype

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-5


@dataclass
class GradCase:
    op: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator], Sequence[np.ndarray]]
    seed: int = 0


@dataclass
class GradResult:
    op: str
    seed: int
    error: float
    passed: bool
    detail: str = ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   h: float = DEFAULT_STEP) -> float:
    """Largest relative error over all inputs of ``fn`` at 64-bit precision.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes to the checked gradient.
    """
    with default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        probe_shape = fn(*[Tensor(a) for a in arrays]).shape
        probe = np.random.default_rng(seed + 7919).standard_normal(probe_shape)

        def scalar(*tensors):
            out = fn(*tensors)
            return T.tsum(T.mul(out, probe))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        backward(scalar(*leaves))
        worst = 0.0
        for k, arr in enumerate(arrays):
            def f():
                return float(scalar(*[Tensor(a) for a in arrays]).data)

            numeric = numeric_grad(f, arr, h)
            analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
            worst = max(worst, relative_error(np.asarray(analytic), numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (margin + np.abs(x))


def _sample_coords(rng, h, w, n=(5, 6)):
    # keep points strictly inside cells so FD steps never cross an integer
    ys = rng.integers(0, h - 1, size=n) + rng.uniform(0.1, 0.9, size=n)
    xs = rng.integers(0, w - 1, size=n) + rng.uniform(0.1, 0.9, size=n)
    ys[0, 0] = -3.0  # one sample outside the source
    return ys, xs


def default_cases() -> list[GradCase]:
    cases = [
        GradCase("add", T.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
        GradCase("sub", T.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
        GradCase("mul", T.mul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 4))]),
        GradCase("div", T.div, lambda r: [r.standard_normal((3, 4)), 1.5 + r.random((3, 4))]),
        GradCase("matmul", T.matmul, lambda r: [r.standard_normal((3, 5)), r.standard_normal((5, 2))]),
        GradCase("conv2d", T.conv2d, lambda r: [r.standard_normal((2, 3, 6, 5)), r.standard_normal((4, 3, 3, 3)),
                                                r.standard_normal(4)]),
        GradCase("relu", T.relu, lambda r: [_away_from_zero(r, (4, 5))]),
        GradCase("abs", T.tabs, lambda r: [_away_from_zero(r, (4, 5))]),
        GradCase("square", T.square, lambda r: [r.standard_normal((4, 5))]),
        GradCase("clamp", lambda x: T.clamp(x, 0.0, 1.0),
                 lambda r: [np.where(r.random((4, 5)) < 0.5, r.uniform(0.1, 0.9, (4, 5)), r.uniform(1.2, 2, (4, 5)))]),
        GradCase("avg_pool", lambda x: T.avg_pool(x, 2), lambda r: [r.standard_normal((2, 6, 8))]),
        GradCase("avg_pool_ragged", lambda x: T.avg_pool(x, 4), lambda r: [r.standard_normal((2, 7, 5))]),
        GradCase("l2_normalize", lambda x: T.l2_normalize(x, axis=0), lambda r: [r.standard_normal((4, 6))]),
        GradCase("bilinear_resize_up", lambda x: T.bilinear_resize(x, (7, 9)), lambda r: [r.standard_normal((2, 4, 5))]),
        GradCase("bilinear_resize_down", lambda x: T.bilinear_resize(x, (3, 2)), lambda r: [r.standard_normal((2, 6, 4))]),
        GradCase("sum", lambda x: T.tsum(x, axis=1), lambda r: [r.standard_normal((3, 4, 2))]),
        GradCase("mean", lambda x: T.mean(x, axis=(0, 2), keepdims=True), lambda r: [r.standard_normal((3, 4, 2))]),
        GradCase("reshape", lambda x: T.reshape(x, (6, 4)), lambda r: [r.standard_normal((2, 3, 4))]),
        GradCase("transpose", lambda x: T.transpose(x, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
        GradCase("concat", lambda a, b: T.concat([a, b], axis=1),
                 lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 4))]),
        GradCase("take", lambda x: T.take(x, (slice(None), np.array([0, 2, 2, 3]))), lambda r: [r.standard_normal((3, 5))]),
        GradCase("max", T.tmax, lambda r: [r.permutation(20).reshape(4, 5) / 7.0]),
        GradCase("min", T.tmin, lambda r: [r.permutation(20).reshape(4, 5) / 7.0]),
        GradCase("log_softmax", lambda x: T.log_softmax(x, axis=1), lambda r: [r.standard_normal((3, 6))]),
    ]
    coord_rng = np.random.default_rng(11)
    ys, xs = _sample_coords(coord_rng, 6, 7)
    cases.append(GradCase("grid_sample", lambda x: T.grid_sample(x, ys, xs), lambda r: [r.standard_normal((2, 6, 7))]))
    return cases


def run_suite(cases: Sequence[GradCase] | None = None, tol: float = DEFAULT_TOL,
              extra: Sequence[Callable[[], GradResult]] = ()) -> list[GradResult]:
    results = []
    for case in cases if cases is not None else default_cases():
        rng = np.random.default_rng(case.seed)
        try:
            err = check_function(case.fn, case.make_inputs(rng), seed=case.seed)
            results.append(GradResult(case.op, case.seed, err, err <= tol))
        except Exception as exc:  # a crashing op is a failed check, not a crashed suite
            results.append(GradResult(case.op, case.seed, float("nan"), False, f"{type(exc).__name__}: {exc}"))
    for check in extra:
        results.append(check())
    return results


def format_table(results: Sequence[GradResult]) -> str:
    lines = [f"{'op':<28} {'seed':>5} {'rel_error':>11}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.op:<28} {r.seed:>5} {r.error:>11.3e}  {status}"
        if r.detail:
            line += f"  ({r.detail})"
        lines.append(line)
    return "\n".join(lines)
