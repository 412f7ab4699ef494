"""Toy pretraining of the stand-in matcher and the default model cache.

The matcher is trained contrastively on synthetic pairs related by known
homographies, so that nearest-neighbour matching of its features recovers the
geometry.  For the diffusion family a noise predictor is then fitted on the
frozen encoder's latents.  Training scenes use their own seeds and never
overlap the evaluation corpus.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, nn, synth
from . import tensor as T
from .priors import PriorBackbone, extract_prior, forward_diffuse, init_backbone
from .restorer import Restorer, pretrain_toy
from .tensor import Tensor

log = logging.getLogger(__name__)

TRAIN_SEED_OFFSET = 1_000_003


@dataclass
class MatcherTrainConfig:
    seed: int = 0
    pairs: int = 48
    steps: int = 300
    batch: int = 4
    lr: float = 3e-3
    temperature: float = 0.1
    denoiser_steps: int = 300
    max_noise: float = 0.03


def training_pairs(n: int, seed: int, max_noise: float = 0.03) -> list[synth.Pair]:
    """Synthetic pairs for pretraining, drawn from a seed stream disjoint from the corpus."""
    rng = np.random.default_rng([seed, TRAIN_SEED_OFFSET])
    pairs = []
    while len(pairs) < n:
        spec = synth.random_spec(int(rng.integers(1 << 31)) + TRAIN_SEED_OFFSET,
                                 noise_sigma=float(rng.uniform(0, max_noise)))
        spec = synth.with_overrides(spec, scene=str(rng.choice(["mixed", "mixed", "blobs", "checker", "gradient"])))
        try:
            pairs.append(synth.make_pair(spec, f"train_{len(pairs)}"))
        except synth.CoverageError:
            continue
    return pairs


def _features(backbone: PriorBackbone, images: np.ndarray) -> Tensor:
    """Batched pre-diffusion features used by the contrastive objective."""
    if backbone.kind == "patch_token":
        maps = [extract_prior(backbone, Tensor(img)) for img in images]
        return T.concat([T.reshape(m, (1,) + m.shape) for m in maps], axis=0)
    x = T.sub(nn.image_to_chw(Tensor(images)), 0.5)
    if backbone.kind == "autoregressive":
        return backbone.pyramid(x)[0]
    return backbone.encode(x)


def _correspondences(pair: synth.Pair, grid_hw: tuple[int, int], stride: int):
    """Cells of the LQ grid whose centres land inside the HQ frame, and where they land (feature units)."""
    centers = geometry.cell_centers(grid_hw, stride)
    mapped = geometry.apply_homography(pair.truth.transform, centers)
    h, w = pair.hq.shape[:2]
    inside = (mapped[:, 0] >= 0) & (mapped[:, 0] <= w - 1) & (mapped[:, 1] >= 0) & (mapped[:, 1] <= h - 1)
    feat = geometry.apply_homography(np.linalg.inv(geometry.stride_matrix(stride)), mapped[inside])
    return np.flatnonzero(inside), feat


def contrastive_loss(fa: Tensor, fb: Tensor, cells: np.ndarray, feat_xy: np.ndarray, temperature: float) -> Tensor:
    """Symmetric InfoNCE between LQ cells and bilinearly sampled HQ features at their true positions."""
    c = fa.shape[0]
    a = T.l2_normalize(T.take(T.reshape(fa, (c, -1)), (slice(None), cells)), axis=0)
    pos = T.grid_sample(fb, feat_xy[:, 1], feat_xy[:, 0])
    b = T.l2_normalize(pos, axis=0)
    logits = T.mul(T.matmul(T.transpose(a), b), 1.0 / temperature)
    n = len(cells)
    diag = (np.arange(n), np.arange(n))
    rows = T.take(T.log_softmax(logits, axis=1), diag)
    cols = T.take(T.log_softmax(logits, axis=0), diag)
    return T.mul(T.add(T.tsum(rows), T.tsum(cols)), -0.5 / n)


def pretrain_matcher(kind: str = "diffusion", config: MatcherTrainConfig | None = None,
                     pairs: list[synth.Pair] | None = None) -> PriorBackbone:
    cfg = config or MatcherTrainConfig()
    pairs = pairs if pairs is not None else training_pairs(cfg.pairs, cfg.seed, cfg.max_noise)
    backbone = init_backbone(kind, seed=cfg.seed, trainable=True)
    grid = (16, 16)
    corr = [_correspondences(p, grid, backbone.s_z) for p in pairs]
    rng = np.random.default_rng([cfg.seed, 55])

    def loss_fn(step):
        idx = rng.choice(len(pairs), size=cfg.batch, replace=False)
        fa = _features(backbone, np.stack([pairs[i].lq for i in idx]))
        fb = _features(backbone, np.stack([pairs[i].hq for i in idx]))
        total = None
        for k, i in enumerate(idx):
            cells, feat = corr[i]
            term = contrastive_loss(T.take(fa, k), T.take(fb, k), cells, feat, cfg.temperature)
            total = term if total is None else T.add(total, term)
        return T.mul(total, 1.0 / cfg.batch)

    def cosine(step):
        return 0.5 * (1 + np.cos(np.pi * step / cfg.steps))

    hist = nn.train_params(backbone.params.trainable(), loss_fn, cfg.steps, cfg.lr, cosine,
                           log=lambda s, v: log.debug("matcher step %d loss %.4f", s, v))
    log.info("matcher contrastive loss %.4f -> %.4f", np.mean(hist[:10]), np.mean(hist[-10:]))
    if kind == "diffusion":
        _fit_denoiser(backbone, pairs, cfg, rng)
    return backbone.frozen()


def _fit_denoiser(backbone: PriorBackbone, pairs: list[synth.Pair], cfg: MatcherTrainConfig,
                  rng: np.random.Generator) -> None:
    images = np.stack([img for p in pairs for img in (p.lq, p.hq)])
    z0 = backbone.encode(T.sub(nn.image_to_chw(Tensor(images)), 0.5)).data
    scale = 1.0 / max(float(z0.std()), 1e-6)
    backbone.params["latent_scale"].data[...] = scale
    z0 = z0 * scale
    # the encoder stays fixed: only the noise predictor is handed to the optimizer
    denoiser = [p for p in backbone.params.trainable() if p.name.startswith("den")]

    def loss_fn(step):
        idx = rng.choice(len(z0), size=2 * cfg.batch, replace=False)
        t = int(rng.integers(1, backbone.n_steps + 1))
        eps = rng.standard_normal(z0[idx].shape).astype(z0.dtype)
        z_t = forward_diffuse(z0[idx], t, eps, backbone.schedule).astype(z0.dtype)
        pred = backbone.denoise(Tensor(z_t), t)
        return T.mean(T.square(T.sub(pred, eps)))

    hist = nn.train_params(denoiser, loss_fn, cfg.denoiser_steps, cfg.lr)
    log.info("denoiser mse %.4f -> %.4f", np.mean(hist[:10]), np.mean(hist[-10:]))


def clean_side_pairs(pairs: list[synth.Pair], max_noise: float, seed: int) -> list[synth.Pair]:
    """Copies of ``pairs`` whose LQ side is the clean scene plus at most ``max_noise`` Gaussian noise."""
    rng = np.random.default_rng([seed, 61])
    out = []
    for p in pairs:
        clean = np.asarray(p.truth.clean)
        lq = np.clip(clean + rng.standard_normal(clean.shape) * rng.uniform(0, max_noise), 0, 1)
        out.append(synth.Pair(p.pair_id, p.spec, lq.astype(np.float32), p.hq, p.truth))
    return out


def pretrain_models(pairs: list[synth.Pair], cfg: dict) -> tuple[PriorBackbone, Restorer]:
    """Matcher and restorer trained on a corpus, driven by a resolved run config."""
    if not pairs:
        raise ValueError("pretraining needs at least one pair")
    seed = cfg["model_seed"]
    mcfg = MatcherTrainConfig(seed=seed, steps=cfg["matcher_steps"], denoiser_steps=cfg["denoiser_steps"],
                              max_noise=cfg["matcher_max_noise"], batch=min(MatcherTrainConfig.batch, len(pairs)))
    matcher = pretrain_matcher(cfg["kind"], mcfg, clean_side_pairs(pairs, mcfg.max_noise, seed))
    restorer = pretrain_toy(seed, cfg["restorer_steps"], [p.truth.clean for p in pairs])
    return matcher, restorer


# --- cache ----------------------------------------------------------------------------------

def default_models(cache_dir: str | Path | None = None, kind: str = "diffusion", seed: int = 0,
                   restorer_steps: int = 2000) -> tuple[PriorBackbone, Restorer]:
    """Pretrained matcher and restorer, loaded from ``cache_dir`` when present."""
    tag = f"{kind}_s{seed}_r{restorer_steps}"
    if cache_dir is not None:
        cache = Path(cache_dir)
        m_stem, r_stem = cache / f"matcher_{tag}", cache / f"restorer_{tag}"
        if m_stem.with_suffix(".json").exists() and r_stem.with_suffix(".json").exists():
            try:
                return PriorBackbone.load(m_stem), Restorer.load(r_stem)
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                log.warning("ignoring unreadable model cache %s: %s", cache, exc)
    matcher = pretrain_matcher(kind, MatcherTrainConfig(seed=seed))
    restorer = pretrain_toy(seed=seed, steps=restorer_steps)
    if cache_dir is not None:
        matcher.save(m_stem)
        restorer.save(r_stem)
    return matcher, restorer
