"""Small layer helpers shared by the backbones, the restorer and pretraining."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamRegistry
from .tensor import Tensor


def add_conv(reg: ParamRegistry, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
             trainable: bool = False, gain: float = np.sqrt(2.0)) -> None:
    """He-initialised ``k x k`` conv weights ``<name>.w`` and zero bias ``<name>.b``."""
    std = gain / np.sqrt(c_in * k * k)
    reg.register(f"{name}.w", rng.standard_normal((c_out, c_in, k, k)) * std, trainable)
    reg.register(f"{name}.b", np.zeros(c_out), trainable)


def conv(reg: ParamRegistry, name: str, x) -> Tensor:
    return T.conv2d(x, reg[f"{name}.w"], reg[f"{name}.b"])


def image_to_chw(image) -> Tensor:
    """``(..., H, W, C)`` image (array or Tensor) -> ``(..., C, H, W)`` Tensor."""
    x = T.as_tensor(image if isinstance(image, Tensor) else np.asarray(image, dtype=T.get_default_dtype()))
    if x.ndim < 3:
        raise T.ShapeError("image", f"expected (..., H, W, C), got {x.shape}")
    axes = tuple(range(x.ndim - 3)) + (x.ndim - 1, x.ndim - 3, x.ndim - 2)
    return T.transpose(x, axes)


def chw_to_image(x) -> Tensor:
    x = T.as_tensor(x)
    axes = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 1, x.ndim - 3)
    return T.transpose(x, axes)


def train_params(params: list, loss_fn, steps: int, lr: float, schedule=None, log=None):
    """Minimal AdamW loop (no weight decay) over ``params``.

    ``loss_fn(step)`` returns a scalar Tensor.  ``schedule(step)`` may return a
    learning-rate multiplier.
    """
    from .optim import AdamW

    opt = AdamW(list(params), lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        if schedule is not None:
            opt.lr = lr * schedule(step)
        loss = loss_fn(step)
        grads = T.backward(loss)
        opt.step(grads)
        history.append(float(loss.data))
        if log is not None:
            log(step, history[-1])
    return history
