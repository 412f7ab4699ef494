"""PNG interchange and on-disk corpus layout.

Images are stored as 8-bit RGB PNGs; floats are quantised only here.  A corpus
directory holds ``<pair_id>_lq.png``, ``<pair_id>_hq.png``,
``<pair_id>_clean.png`` and a ``manifest.json`` with every PairSpec, the
ground-truth transform and the degradation record.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import geometry, synth

MANIFEST = "manifest.json"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_corpus(pairs: list[synth.Pair], out_dir: str | Path, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        files = {}
        for role, img in (("lq", p.lq), ("hq", p.hq), ("clean", p.truth.clean)):
            name = f"{p.pair_id}_{role}.png"
            save_png(out / name, img)
            files[role] = name
        entries.append({
            "pair_id": p.pair_id,
            "spec": p.spec.to_dict(),
            "transform_gt": np.asarray(p.truth.transform).ravel().tolist(),
            "degradation": p.truth.degradation,
            "files": files,
        })
    manifest = {"format": "matres-corpus-1", "meta": meta or {}, "digest": synth.corpus_digest(pairs),
                "pairs": entries}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_corpus(corpus_dir: str | Path) -> list[synth.Pair]:
    root = Path(corpus_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    manifest = json.loads(path.read_text())
    pairs = []
    for e in manifest["pairs"]:
        spec = synth.PairSpec(**e["spec"])
        imgs = {role: load_png(root / name) for role, name in e["files"].items()}
        truth = synth.GroundTruth(imgs["clean"], np.array(e["transform_gt"]).reshape(3, 3), e["degradation"])
        pairs.append(synth.Pair(e["pair_id"], spec, imgs["lq"], imgs["hq"], truth))
    return pairs


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def draw_overlay(path: str | Path, hq: np.ndarray, lq_hw: tuple[int, int], T_gt: np.ndarray, T_est: np.ndarray,
                 scale: int = 4) -> None:
    """HQ image with the LQ frame outline mapped by the true (green) and estimated (red) transforms."""
    h, w = hq.shape[:2]
    canvas = Image.fromarray(to_uint8(hq), mode="RGB").resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    corners = geometry.frame_corners(lq_hw)
    for H, color in ((T_gt, (0, 255, 0)), (T_est, (255, 0, 0))):
        quad = (geometry.apply_homography(H, corners) + 0.5) * scale
        draw.line([tuple(q) for q in quad] + [tuple(quad[0])], fill=color, width=2)
    canvas.save(path, format="PNG")
