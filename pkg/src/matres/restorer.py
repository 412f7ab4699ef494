"""Toy two-stream restoration network and its seeded pretraining.

The encoder maps an image to a stride-2 feature map.  The decoder takes the
(optionally modulated) features of the warped LQ image and of the HQ
reference, concatenates them along channels and decodes back to an image at
the LQ resolution, clamped to [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import nn, synth
from . import tensor as T
from .params import ParamRegistry, load_weights, save_weights
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


class PretrainGateError(RuntimeError):
    """Pretraining finished without reaching the required PSNR margin."""

    def __init__(self, margin: float, required: float, steps: int):
        super().__init__(f"restorer PSNR margin {margin:+.2f} dB is below the required {required:.2f} dB "
                         f"after {steps} steps; train for more steps")
        self.margin = margin
        self.required = required


@dataclass
class Restorer:
    params: ParamRegistry
    c_r: int = 16
    s_r: int = 2
    seed: int = 0

    def meta(self) -> dict:
        return {"c_r": self.c_r, "s_r": self.s_r, "seed": self.seed}

    def frozen(self) -> Restorer:
        return Restorer(self.params.frozen_copy(), **self.meta())

    def save(self, stem, extra: dict | None = None) -> None:
        save_weights(self.params.arrays(), stem, {"model": "restorer", **self.meta(), **(extra or {})})

    @classmethod
    def load(cls, stem) -> Restorer:
        arrays, meta = load_weights(stem)
        if meta.get("model") != "restorer":
            raise ValueError(f"{stem}: not a restorer weight file")
        return cls(ParamRegistry.from_arrays(arrays), meta["c_r"], meta["s_r"], meta["seed"])

    def feature_shape(self, hw: tuple[int, int]) -> tuple[int, int, int]:
        return (self.c_r, -(-hw[0] // self.s_r), -(-hw[1] // self.s_r))

    def encode(self, image) -> Tensor:
        """``(..., H, W, 3)`` image -> ``(..., C_r, ceil(H/2), ceil(W/2))`` features."""
        p = self.params
        x = T.sub(nn.image_to_chw(image), 0.5)
        h = T.relu(nn.conv(p, "enc0", x))
        h = T.relu(nn.conv(p, "enc1", h))
        return nn.conv(p, "enc2", T.avg_pool(h, self.s_r))

    def decode(self, f_lq: Tensor, f_hq: Tensor, out_hw: tuple[int, int]) -> Tensor:
        p = self.params
        h = T.concat([f_lq, f_hq], axis=-3)
        h = T.relu(nn.conv(p, "dec0", h))
        h = T.bilinear_resize(h, out_hw)
        h = T.relu(nn.conv(p, "dec1", h))
        h = nn.conv(p, "dec2", h)
        return T.clamp(T.add(nn.chw_to_image(h), 0.5), 0.0, 1.0)

    def restore(self, warped_lq, hq, inj_lq=None, inj_hq=None) -> Tensor:
        """Decode the two streams, each optionally shifted by an additive injection."""
        f_lq, f_hq = self.encode(warped_lq), self.encode(hq)
        if f_lq.shape != f_hq.shape:
            raise ShapeError("restore", f"LQ and HQ features differ: {f_lq.shape} vs {f_hq.shape}")
        if inj_lq is not None:
            f_lq = _inject(f_lq, inj_lq)
        if inj_hq is not None:
            f_hq = _inject(f_hq, inj_hq)
        hw = (warped_lq.shape[-3], warped_lq.shape[-2])
        return self.decode(f_lq, f_hq, hw)


def _inject(features: Tensor, inj) -> Tensor:
    inj = T.as_tensor(inj)
    if inj.shape != features.shape:
        raise ShapeError("restore", f"injection shape {inj.shape} != encoder output {features.shape}")
    return T.add(features, inj)


def init_restorer(seed: int = 0, c_r: int = 16, s_r: int = 2, trainable: bool = False) -> Restorer:
    rng = np.random.default_rng([seed, 29])
    reg = ParamRegistry()
    nn.add_conv(reg, "enc0", 3, c_r, 3, rng, trainable)
    nn.add_conv(reg, "enc1", c_r, c_r, 3, rng, trainable)
    nn.add_conv(reg, "enc2", c_r, c_r, 3, rng, trainable, gain=1.0)
    nn.add_conv(reg, "dec0", 2 * c_r, 2 * c_r, 3, rng, trainable)
    nn.add_conv(reg, "dec1", 2 * c_r, c_r, 3, rng, trainable)
    nn.add_conv(reg, "dec2", c_r, 3, 3, rng, trainable, gain=1.0)
    return Restorer(reg, c_r, s_r, seed)


# --- toy pretraining ----------------------------------------------------------------------

def psnr_db(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10 * np.log10(1.0 / mse))


@dataclass
class RestorerTrainConfig:
    seed: int = 0
    steps: int = 2000
    batch: int = 8
    crop: int = 32
    lr: float = 2e-3
    noise_range: tuple[float, float] = (0.02, 0.15)
    blur_prob: float = 0.25
    reference_prob: float = 0.5
    jitter: tuple[float, float] = (1.0, 1.5)
    scenes: int = 48
    held_out: int = 8
    eval_sigma: float = 0.1
    required_margin: float = 2.0


def _degrade_crop(rng, clean, cfg: RestorerTrainConfig) -> np.ndarray:
    out = clean
    if rng.random() < cfg.blur_prob:
        out = ndimage.correlate(out, synth.blur_kernel("gaussian", 3)[..., None], mode="nearest")
    out = out + rng.standard_normal(out.shape) * rng.uniform(*cfg.noise_range)
    return np.clip(out, 0, 1)


def _reference_crop(rng, scene, y, x, size, cfg: RestorerTrainConfig) -> np.ndarray:
    """Clean crop at a sub-pixel offset of 1-1.5 px with a random illumination change."""
    angle = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(*cfg.jitter)
    shifted = ndimage.shift(scene, (dist * np.sin(angle), dist * np.cos(angle), 0), order=1, mode="nearest")
    gain, bias = rng.uniform(0.85, 1.15), rng.uniform(-0.05, 0.05)
    return np.clip(gain * shifted[y:y + size, x:x + size] + bias, 0, 1)


def held_out_margin(restorer: Restorer, scenes: list[np.ndarray], sigma: float, seed: int) -> float:
    """Mean PSNR gain of self-referenced restoration over the noisy input."""
    rng = np.random.default_rng([seed, 88])
    gains = []
    for clean in scenes:
        noisy = np.clip(clean + rng.standard_normal(clean.shape) * sigma, 0, 1)
        out = restorer.restore(noisy, noisy).data
        gains.append(psnr_db(out, clean) - psnr_db(noisy, clean))
    return float(np.mean(gains))


def pretrain_toy(seed: int = 0, steps: int = 2000, corpus: list[np.ndarray] | None = None,
                 config: RestorerTrainConfig | None = None) -> Restorer:
    """Train a seeded restorer on crops of clean toy scenes and freeze it.

    Half the samples use the degraded input itself as the reference, half a
    slightly misaligned, re-lit clean view.  Raises :class:`PretrainGateError`
    if the held-out PSNR gain stays below the configured margin.
    """
    cfg = config or RestorerTrainConfig(seed=seed, steps=steps)
    if corpus is None:
        corpus = synth.training_scenes(cfg.scenes, seed)
    corpus = [np.asarray(c, dtype=np.float64) for c in corpus]
    held = synth.training_scenes(cfg.held_out, seed + 7_777_777)
    restorer = init_restorer(seed, trainable=True)
    rng = np.random.default_rng([seed, 31])
    pad = int(np.ceil(cfg.jitter[1])) + 1

    def loss_fn(step):
        lq, ref, target = [], [], []
        for _ in range(cfg.batch):
            scene = corpus[rng.integers(len(corpus))]
            h, w = scene.shape[:2]
            y = int(rng.integers(pad, h - cfg.crop - pad + 1))
            x = int(rng.integers(pad, w - cfg.crop - pad + 1))
            clean = scene[y:y + cfg.crop, x:x + cfg.crop]
            degraded = _degrade_crop(rng, clean, cfg)
            if rng.random() < cfg.reference_prob:
                ref.append(_reference_crop(rng, scene, y, x, cfg.crop, cfg))
            else:
                ref.append(degraded)
            lq.append(degraded)
            target.append(clean)
        out = restorer.restore(np.stack(lq).astype(np.float32), np.stack(ref).astype(np.float32))
        return T.mean(T.square(T.sub(out, np.stack(target).astype(np.float32))))

    def cosine(step):
        return 0.5 * (1 + np.cos(np.pi * step / max(cfg.steps, 1)))

    hist = nn.train_params(restorer.params.trainable(), loss_fn, cfg.steps, cfg.lr, cosine)
    if hist:
        log.info("restorer mse %.5f -> %.5f", np.mean(hist[:20]), np.mean(hist[-20:]))
    frozen = restorer.frozen()
    margin = held_out_margin(frozen, held, cfg.eval_sigma, seed)
    log.info("restorer held-out margin %+.2f dB", margin)
    if margin < cfg.required_margin:
        raise PretrainGateError(margin, cfg.required_margin, cfg.steps)
    return frozen
