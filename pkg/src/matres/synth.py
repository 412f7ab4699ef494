"""Deterministic desk-scale LQ/HQ pairs with known ground truth.

The viewpoint change and illumination shift live on the HQ side; the
degradation (blur, area downsampling with bilinear re-upsampling, additive
Gaussian noise) lives on the LQ side.  The HQ view is rendered from a padded
scene canvas so it has no empty borders.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import geometry
from .tensor import Tensor, bilinear_resize

SCENE_KINDS = ("checker", "gradient", "blobs", "mixed")
CANVAS_MARGIN = 32
MIXED_CONTRAST = 0.2


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class PairSpec:
    seed: int = 0
    scene: str = "mixed"
    height: int = 64
    width: int = 64
    channels: int = 3
    noise_sigma: float = 0.0
    blur: str = "gaussian"
    blur_k: int = 1
    downsample: int = 1
    rotation_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    persp_x: float = 0.0
    persp_y: float = 0.0
    gain: float = 1.0
    bias: float = 0.0

    def validate(self) -> PairSpec:
        if self.scene not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.scene!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blur_k < 1 or self.blur_k % 2 == 0:
            raise ValueError(f"blur_k must be odd and >= 1, got {self.blur_k}")
        if self.blur not in ("gaussian", "box"):
            raise ValueError(f"blur must be 'gaussian' or 'box', got {self.blur!r}")
        if self.downsample not in (1, 2, 4):
            raise ValueError(f"downsample must be 1, 2 or 4, got {self.downsample}")
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    clean: np.ndarray
    transform: np.ndarray
    degradation: list[dict] = field(default_factory=list)


@dataclass
class Pair:
    pair_id: str
    spec: PairSpec
    lq: np.ndarray
    hq: np.ndarray
    truth: GroundTruth


# --- scenes ---------------------------------------------------------------------------

def _smooth_noise(rng, h, w, c, cell):
    coarse = rng.random((c, -(-h // cell) + 1, -(-w // cell) + 1))
    up = bilinear_resize(Tensor(coarse, dtype=np.float64), ((-(-h // cell) + 1) * cell, (-(-w // cell) + 1) * cell)).data
    return up[:, :h, :w].transpose(1, 2, 0)


def _blobs(rng, h, w, c, count):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.tile(rng.uniform(0.2, 0.8, c), (h, w, 1))
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.5, 7.0)
        bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * r * r))
        img += bump[..., None] * rng.uniform(-0.6, 0.6, c)
    return img


def _stretch(img):
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    return 0.05 + 0.9 * (img - lo) / np.maximum(hi - lo, 1e-9)


def gen_scene(seed: int, kind: str = "mixed", size: tuple[int, int] = (64, 64), channels: int = 3,
              antialias: bool = True) -> np.ndarray:
    """Structured texture in [0, 1], shape ``(H, W, C)``; pure in its arguments."""
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    h, w = size
    rng = np.random.default_rng([seed, SCENE_KINDS.index(kind)])
    if kind == "checker":
        cell = int(rng.integers(5, 11))
        oy, ox = rng.integers(0, cell, 2)
        ys, xs = np.mgrid[0:h, 0:w]
        parity = (((ys + oy) // cell + (xs + ox) // cell) % 2).astype(bool)
        dark = rng.uniform(0.05, 0.35, channels)
        light = rng.uniform(0.65, 0.95, channels)
        img = np.where(parity[..., None], light, dark)
        if antialias:
            img = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
        return img
    if kind == "gradient":
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xs + np.sin(angle) * ys) / max(h, w)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radial = np.hypot(ys - cy, xs - cx) / max(h, w)
        img = ramp[..., None] * rng.uniform(0.5, 1.0, channels) + radial[..., None] * rng.uniform(-0.5, 0.5, channels)
        return _stretch(img)
    if kind == "blobs":
        return np.clip(_blobs(rng, h, w, channels, count=max(8, h * w // 100)), 0, 1)
    # mixed: blobs + multi-octave noise + hard-edged rectangles and strokes, at a fixed contrast
    img = 0.5 * _blobs(rng, h, w, channels, count=max(8, h * w // 120))
    for cell, amp in ((16, 0.35), (8, 0.25), (4, 0.15)):
        img += amp * (_smooth_noise(rng, h, w, channels, cell) - 0.5)
    for _ in range(max(3, h * w // 250)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        if rng.random() < 0.6:
            dy, dx = rng.integers(3, 12, 2)
        else:
            thick = int(rng.integers(1, 3))
            dy, dx = (thick, rng.integers(6, 20)) if rng.random() < 0.5 else (rng.integers(6, 20), thick)
        img[y0:y0 + dy, x0:x0 + dx] += rng.uniform(-0.8, 0.8, channels)
    if antialias:
        img = ndimage.gaussian_filter(img, sigma=(0.5, 0.5, 0), mode="nearest")
    img = img - img.mean(axis=(0, 1), keepdims=True)
    img = 0.5 + MIXED_CONTRAST * img / np.maximum(img.std(axis=(0, 1), keepdims=True), 1e-9)
    return np.clip(img, 0.0, 1.0)


# --- degradations -----------------------------------------------------------------------

def blur_kernel(kind: str, k: int) -> np.ndarray:
    if k == 1:
        return np.ones((1, 1))
    if kind == "box":
        return np.full((k, k), 1.0 / (k * k))
    sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    ax = np.arange(k) - (k - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    kern = np.outer(g, g)
    return kern / kern.sum()


def area_downsample(image: np.ndarray, s: int) -> np.ndarray:
    h, w, c = image.shape
    if h % s or w % s:
        raise ValueError(f"image {h}x{w} not divisible by downsample factor {s}")
    return image.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))


def bilinear_upsample(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    chw = Tensor(image.transpose(2, 0, 1), dtype=np.float64)
    return bilinear_resize(chw, size).data.transpose(1, 2, 0)


def degrade(image: np.ndarray, spec: PairSpec, rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, list[dict]]:
    """Blur, then area-downsample + bilinear re-upsample, then noise; clamps to [0, 1].

    Returns the degraded image and the record of applied steps.
    """
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng([spec.seed, 101])
    out = np.asarray(image, dtype=np.float64)
    record = []
    if spec.blur_k > 1:
        kern = blur_kernel(spec.blur, spec.blur_k)
        out = np.stack([ndimage.correlate(out[..., c], kern, mode="nearest") for c in range(out.shape[2])], axis=-1)
        record.append({"step": "blur", "kind": spec.blur, "k": spec.blur_k})
    if spec.downsample > 1:
        small = area_downsample(out, spec.downsample)
        out = bilinear_upsample(small, out.shape[:2])
        record.append({"step": "downsample", "factor": spec.downsample})
    if spec.noise_sigma > 0:
        out = out + rng.standard_normal(out.shape) * spec.noise_sigma
        record.append({"step": "noise", "sigma": spec.noise_sigma})
    return np.clip(out, 0.0, 1.0), record


# --- geometry and pairs -------------------------------------------------------------------

def homography_from_spec(spec: PairSpec) -> np.ndarray:
    """Rotation/scale/perspective about the frame centre followed by a translation."""
    cx, cy = (spec.width - 1) / 2, (spec.height - 1) / 2
    th = np.deg2rad(spec.rotation_deg)
    rs = np.array([[spec.scale * np.cos(th), -spec.scale * np.sin(th), 0.0],
                   [spec.scale * np.sin(th), spec.scale * np.cos(th), 0.0],
                   [0.0, 0.0, 1.0]])
    persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [spec.persp_x, spec.persp_y, 1.0]])
    H = geometry.translation(cx + spec.tx, cy + spec.ty) @ persp @ rs @ geometry.translation(-cx, -cy)
    return geometry.normalize_homography(H)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used by PNG interchange."""
    return np.round(np.clip(image, 0, 1) * 255.0) / 255.0


def make_pair(spec: PairSpec, pair_id: str = "pair", quantize_8bit: bool = False) -> Pair:
    spec.validate()
    h, w, m = spec.height, spec.width, CANVAS_MARGIN
    H = homography_from_spec(spec)
    coverage = geometry.valid_mask(H, (h, w), (h, w)).mean()
    if coverage < 0.5:
        raise CoverageError(f"homography covers only {coverage:.0%} of the HQ frame; use milder parameters")
    canvas = gen_scene(spec.seed, spec.scene, (h + 2 * m, w + 2 * m), spec.channels)
    clean = canvas[m:m + h, m:m + w]
    viewed, _ = geometry.warp(canvas, H @ geometry.translation(-m, -m), (h, w))
    hq = np.clip(spec.gain * viewed + spec.bias, 0.0, 1.0)
    lq, record = degrade(clean, spec)
    if quantize_8bit:
        clean, lq, hq = quantize(clean), quantize(lq), quantize(hq)
    return Pair(pair_id, spec, lq, hq, GroundTruth(clean.copy(), H, record))


def random_spec(seed: int, noise_sigma: float = 0.1, rotation: float = 15.0, scale: tuple[float, float] = (0.9, 1.1),
                shift: float = 5.0, perspective: float = 2e-4, gain: tuple[float, float] = (0.85, 1.15),
                bias: float = 0.05, scene: str = "mixed", size: tuple[int, int] = (64, 64)) -> PairSpec:
    rng = np.random.default_rng([seed, 7])
    return PairSpec(
        seed=seed, scene=scene, height=size[0], width=size[1], noise_sigma=noise_sigma,
        rotation_deg=float(rng.uniform(-rotation, rotation)),
        scale=float(rng.uniform(*scale)),
        tx=float(rng.uniform(-shift, shift)), ty=float(rng.uniform(-shift, shift)),
        persp_x=float(rng.uniform(-perspective, perspective)),
        persp_y=float(rng.uniform(-perspective, perspective)),
        gain=float(rng.uniform(*gain)), bias=float(rng.uniform(-bias, bias)),
    )


def corpus_specs(n: int, seed: int, **kwargs) -> list[PairSpec]:
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [random_spec(int(s), **kwargs) for s in seeds]


def build_corpus(n: int = 20, seed: int = 7, **kwargs) -> list[Pair]:
    """The default evaluation corpus: ``n`` pairs, 8-bit quantized like their PNG form."""
    return [make_pair(spec, f"pair_{i:03d}", quantize_8bit=True) for i, spec in enumerate(corpus_specs(n, seed, **kwargs))]


def corpus_digest(pairs: list[Pair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        for img in (p.lq, p.hq, p.truth.clean):
            h.update(np.round(img * 255).astype(np.uint8).tobytes())
        h.update(np.asarray(p.truth.transform, dtype="<f8").tobytes())
    return h.hexdigest()


def training_scenes(n: int, seed: int, size: tuple[int, int] = (64, 64)) -> list[np.ndarray]:
    """Clean scenes for toy pretraining, drawn from all kinds except pure checkerboards."""
    rng = np.random.default_rng([seed, 3])
    kinds = ("mixed", "mixed", "blobs", "gradient", "checker")
    return [gen_scene(int(rng.integers(1 << 31)), kinds[i % len(kinds)], size) for i in range(n)]


def with_overrides(spec: PairSpec, **changes) -> PairSpec:
    return replace(spec, **changes).validate()
