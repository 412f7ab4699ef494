"""Generative-prior extraction with small frozen stand-in backbones.

Three families share one dispatch, :func:`extract_prior`:

* ``diffusion``: encode to a latent, noise it to a fixed timestep with a
  seeded draw, then take one deterministic reverse step with a learned
  noise predictor; the denoised latent is the prior.
* ``autoregressive``: a feature pyramid whose per-level global averages are
  combined into a descriptor that is tiled over the base map.
* ``patch_token``: a learned linear map of non-overlapping image patches.

All three return a ``(C_z, ceil(H/s_z), ceil(W/s_z))`` map, so downstream code
does not care which one produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .params import ParamRegistry, load_weights, save_weights
from .tensor import ShapeError, Tensor

KINDS = ("diffusion", "autoregressive", "patch_token")
VIEWS = ("source", "reference")


# --- noise schedule ----------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bars[k] = prod_{s<=k} (1 - betas[s])``.

    Timesteps are 1-based when indexing the schedule: step ``t`` uses
    ``betas[t-1]``, and ``t = 0`` is the clean signal with ``alpha_bar = 1``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        self._check(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        if t == 0:
            raise ValueError("alpha is undefined at t=0")
        return float(1.0 - self.betas[t - 1])

    def _check(self, t: int) -> None:
        if not 0 <= t <= self.n_steps:
            raise ValueError(f"timestep {t} outside [0, {self.n_steps}]")


def build_schedule(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64).reshape(-1)
    if betas.size == 0:
        raise ValueError("noise schedule needs at least one beta")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def linear_schedule(n_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return build_schedule(np.linspace(beta_start, beta_end, n_steps))


def forward_diffuse(z0, t: int, eps, schedule: NoiseSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; works on arrays or Tensors."""
    if np.shape(eps) != np.shape(z0.data if isinstance(z0, Tensor) else z0):
        raise ShapeError("forward_diffuse", f"noise shape {np.shape(eps)} != latent shape {np.shape(z0)}")
    ab = schedule.alpha_bar(t)
    if isinstance(z0, Tensor):
        eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
        return T.add(T.mul(z0, np.sqrt(ab)), (np.sqrt(1.0 - ab) * eps).astype(z0.dtype))
    return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def reverse_step(z_t, t: int, denoiser: Callable, schedule: NoiseSchedule, sigma_t: float = 0.0, noise=None):
    """One ancestral step ``z_t -> z_{t-1}`` using the predicted noise ``denoiser(z_t, t)``."""
    if t < 1:
        raise ValueError("reverse_step needs t >= 1")
    if sigma_t < 0:
        raise ValueError("sigma_t must be >= 0")
    alpha = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    eps_hat = denoiser(z_t, t)
    coef = (1.0 - alpha) / np.sqrt(1.0 - ab)
    tensor_mode = isinstance(z_t, Tensor)
    if tensor_mode:
        out = T.mul(T.sub(z_t, T.mul(eps_hat, coef)), 1.0 / np.sqrt(alpha))
    else:
        eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
        out = (np.asarray(z_t) - coef * eps_hat) / np.sqrt(alpha)
    if sigma_t > 0:
        if noise is None:
            raise ValueError("sigma_t > 0 requires a noise draw")
        extra = sigma_t * (noise.data if isinstance(noise, Tensor) else np.asarray(noise))
        out = T.add(out, extra.astype(out.dtype)) if tensor_mode else out + extra
    return out


# --- autoregressive and patch-token families ------------------------------------------------

def global_average(f) -> Tensor:
    return T.mean(T.as_tensor(f), axis=(-2, -1))


def extract_ar_prior(pyramid) -> Tensor:
    """Mean over pyramid levels of each level's per-channel global average."""
    if len(pyramid) < 1:
        raise ValueError("pyramid needs at least one level")
    levels = [T.as_tensor(f) for f in pyramid]
    channels = {f.shape[0] for f in levels}
    if len(channels) != 1:
        raise ShapeError("extract_ar_prior", f"levels disagree on channel count: {sorted(channels)}")
    total = global_average(levels[0])
    for f in levels[1:]:
        total = T.add(total, global_average(f))
    return T.mul(total, 1.0 / len(levels))


def extract_patch_tokens(image, patch: int, weight, bias=None) -> Tensor:
    """Linear tokens of non-overlapping ``patch x patch`` blocks as a ``(C, H/P, W/P)`` map.

    ``image`` is ``(H, W, C_in)``; each patch is flattened in (row, col, channel)
    order and mapped by ``weight`` of shape ``(C, P*P*C_in)``.
    """
    x = T.as_tensor(image if isinstance(image, Tensor) else np.asarray(image, dtype=T.get_default_dtype()))
    h, w, c = x.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError("extract_patch_tokens", f"{h}x{w} image is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    blocks = T.reshape(x, (gh, patch, gw, patch, c))
    blocks = T.transpose(blocks, (0, 2, 1, 3, 4))
    flat = T.reshape(blocks, (gh * gw, patch * patch * c))
    tokens = T.matmul(flat, T.transpose(T.as_tensor(weight)))
    if bias is not None:
        tokens = T.add(tokens, bias)
    return T.reshape(T.transpose(tokens), (-1, gh, gw))


# --- backbone --------------------------------------------------------------------------------

@dataclass
class PriorBackbone:
    kind: str
    params: ParamRegistry
    c_z: int = 16
    s_z: int = 4
    seed: int = 0
    t_extract: int = 25
    n_steps: int = 50
    sigma_t: float = 0.0
    ar_mode: str = "mean"
    schedule: NoiseSchedule = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.ar_mode not in ("mean", "concat"):
            raise ValueError(f"ar_mode must be 'mean' or 'concat', got {self.ar_mode!r}")
        self.schedule = linear_schedule(self.n_steps)
        if not 1 <= self.t_extract <= self.n_steps:
            raise ValueError(f"t_extract must lie in [1, {self.n_steps}]")

    def meta(self) -> dict:
        return {"kind": self.kind, "c_z": self.c_z, "s_z": self.s_z, "seed": self.seed,
                "t_extract": self.t_extract, "n_steps": self.n_steps, "sigma_t": self.sigma_t,
                "ar_mode": self.ar_mode}

    def frozen(self) -> PriorBackbone:
        return PriorBackbone(self.kind, self.params.frozen_copy(), **_fields(self.meta()))

    def save(self, stem) -> None:
        save_weights(self.params.arrays(), stem, {"model": "matcher", **self.meta()})

    @classmethod
    def load(cls, stem) -> PriorBackbone:
        arrays, meta = load_weights(stem)
        if meta.get("model") != "matcher":
            raise ValueError(f"{stem}: not a matcher weight file")
        return cls(meta["kind"], ParamRegistry.from_arrays(arrays), **_fields(meta))

    # building blocks -------------------------------------------------------------------------

    def encode(self, x: Tensor) -> Tensor:
        """Conv encoder ``(..., 3, H, W) -> (..., C_z, H/4, W/4)``."""
        p = self.params
        h = T.relu(nn.conv(p, "enc0", x))
        h = T.avg_pool(T.relu(nn.conv(p, "enc1", h)), 2)
        h = T.avg_pool(T.relu(nn.conv(p, "enc2", h)), 2)
        return nn.conv(p, "enc3", h)

    def latent(self, x: Tensor) -> Tensor:
        return T.mul(self.encode(x), self.params["latent_scale"])

    def denoise(self, z_t: Tensor, t: int) -> Tensor:
        """Noise prediction, conditioned on ``t`` through an extra constant channel."""
        tchan = np.full(z_t.shape[:-3] + (1,) + z_t.shape[-2:], t / self.n_steps, dtype=z_t.dtype)
        h = T.concat([z_t, Tensor(tchan)], axis=-3)
        h = T.relu(nn.conv(self.params, "den0", h))
        return nn.conv(self.params, "den1", h)

    def noise_draw(self, shape: tuple[int, ...], view: str = "source") -> np.ndarray:
        """Seeded extraction noise for one view.

        The draw depends only on the seed, the view and the shape.  The two views
        get independent draws: noise shared at identical cell positions would
        pull every match towards the identity transform.
        """
        if view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
        rng = np.random.default_rng([self.seed, 4242, VIEWS.index(view), *shape])
        return rng.standard_normal(shape).astype(T.get_default_dtype())

    def pyramid(self, x: Tensor) -> list[Tensor]:
        f1 = self.encode(x)
        f2 = T.avg_pool(nn.conv(self.params, "pyr1", T.relu(f1)), 2)
        f3 = T.avg_pool(nn.conv(self.params, "pyr2", T.relu(f2)), 2)
        return [f1, f2, f3]


def _fields(meta: dict) -> dict:
    keys = ("c_z", "s_z", "seed", "t_extract", "n_steps", "sigma_t", "ar_mode")
    return {k: meta[k] for k in keys if k in meta}


def init_backbone(kind: str = "diffusion", seed: int = 0, c_z: int = 16, s_z: int = 4, trainable: bool = False,
                  **options) -> PriorBackbone:
    """Seeded, untrained backbone.  ``trainable=True`` is for pretraining only."""
    if kind not in KINDS:
        raise ValueError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([seed, KINDS.index(kind), 17])
    reg = ParamRegistry()
    if kind == "patch_token":
        fan_in = s_z * s_z * 3
        reg.register("tok.w", rng.standard_normal((c_z, fan_in)) / np.sqrt(fan_in), trainable)
        reg.register("tok.b", np.zeros(c_z), trainable)
    else:
        if s_z != 4:
            raise ValueError("convolutional backbones have a fixed stride of 4")
        nn.add_conv(reg, "enc0", 3, 16, 3, rng, trainable)
        nn.add_conv(reg, "enc1", 16, 16, 3, rng, trainable)
        nn.add_conv(reg, "enc2", 16, 32, 3, rng, trainable)
        nn.add_conv(reg, "enc3", 32, c_z, 3, rng, trainable, gain=1.0)
    if kind == "diffusion":
        reg.register("latent_scale", np.ones(1), False)
        nn.add_conv(reg, "den0", c_z + 1, 32, 3, rng, trainable)
        nn.add_conv(reg, "den1", 32, c_z, 3, rng, trainable, gain=1.0)
    if kind == "autoregressive":
        nn.add_conv(reg, "pyr1", c_z, c_z, 3, rng, trainable, gain=1.0)
        nn.add_conv(reg, "pyr2", c_z, c_z, 3, rng, trainable, gain=1.0)
        if options.get("ar_mode") == "concat":
            reg.register("ar_proj.w", rng.standard_normal((c_z, 2 * c_z, 1, 1)) / np.sqrt(2 * c_z), False)
            reg.register("ar_proj.b", np.zeros(c_z), False)
    return PriorBackbone(kind, reg, c_z=c_z, s_z=s_z, seed=seed, **options)


def extract_prior(backbone: PriorBackbone, image, view: str = "source") -> Tensor:
    """Prior feature map of an ``(H, W, 3)`` image in [0, 1].

    ``view`` selects the diffusion noise draw: images that will be compared
    against each other should come from different views.  Differentiable with
    respect to ``image`` when it is a Tensor; the backbone's own weights are
    frozen and never receive gradients.
    """
    if backbone.kind == "patch_token":
        x = T.as_tensor(image if isinstance(image, Tensor) else np.asarray(image, dtype=T.get_default_dtype()))
        return extract_patch_tokens(T.sub(x, 0.5), backbone.s_z, backbone.params["tok.w"], backbone.params["tok.b"])
    x = T.sub(nn.image_to_chw(image), 0.5)
    if backbone.kind == "diffusion":
        z0 = backbone.latent(x)
        eps = backbone.noise_draw(z0.shape, view)
        z_t = forward_diffuse(z0, backbone.t_extract, eps, backbone.schedule)
        noise = None
        if backbone.sigma_t > 0:
            noise = np.random.default_rng([backbone.seed, 977, VIEWS.index(view), *z0.shape]).standard_normal(z0.shape)
        return reverse_step(z_t, backbone.t_extract, backbone.denoise, backbone.schedule,
                            backbone.sigma_t, noise)
    levels = backbone.pyramid(x)
    desc = extract_ar_prior(levels)
    base = levels[0]
    tiled = T.mul(T.reshape(desc, desc.shape + (1, 1)), np.ones((1,) + base.shape[-2:], dtype=base.dtype))
    if backbone.ar_mode == "concat":
        return nn.conv(backbone.params, "ar_proj", T.concat([base, tiled], axis=0))
    return T.add(base, tiled)
