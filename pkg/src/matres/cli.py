"""Command-line interface: ``matres {synth,pretrain,adapt,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 gate or assertion failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evalkit, imageio, models, synth, tta
from .adapter import AdapterState
from .gradcheck import format_table, run_suite
from .priors import PriorBackbone
from .restorer import PretrainGateError, Restorer

log = logging.getLogger("matres")

EXIT_OK, EXIT_USAGE, EXIT_GATE = 0, 1, 2
MATCHER_STEM, RESTORER_STEM = "matcher", "restorer"


class UsageError(Exception):
    pass


class GateError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolved(args) -> dict:
    return cfgmod.resolve(args.config, args.override)


def _fresh_dir(path: Path, force: bool, marker: str) -> None:
    if (path / marker).exists():
        if not force:
            raise UsageError(f"{path} already holds {marker}; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


# --- synth ------------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolved(args)
    if cfg["n_pairs"] < 1:
        raise UsageError("n_pairs must be >= 1")
    out = Path(args.out)
    _fresh_dir(out, args.force, imageio.MANIFEST)
    pairs = synth.build_corpus(cfg["n_pairs"], cfg["seed"], **cfgmod.corpus_kwargs(cfg))
    imageio.write_corpus(pairs, out, {"seed": cfg["seed"], "n_pairs": cfg["n_pairs"]})
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


# --- pretrain ---------------------------------------------------------------------------------

def _load_corpus(path) -> list[synth.Pair]:
    path = Path(path)
    if not (path / imageio.MANIFEST).exists():
        raise UsageError(f"corpus not found: {path} (no {imageio.MANIFEST})")
    return imageio.read_corpus(path)


def cmd_pretrain(args) -> int:
    cfg = _resolved(args)
    pairs = _load_corpus(args.corpus)
    out = Path(args.out)
    _fresh_dir(out, args.force, f"{MATCHER_STEM}.json")
    try:
        matcher, restorer = models.pretrain_models(pairs, cfg)
    except PretrainGateError as exc:
        raise GateError(str(exc)) from exc
    matcher.save(out / MATCHER_STEM)
    restorer.save(out / RESTORER_STEM)
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    print(f"matcher {matcher.params.digest()[:12]}  restorer {restorer.params.digest()[:12]}  -> {out}")
    return EXIT_OK


def _load_models(path) -> tuple[PriorBackbone, Restorer]:
    path = Path(path)
    for stem in (MATCHER_STEM, RESTORER_STEM):
        if not (path / f"{stem}.json").exists():
            raise UsageError(f"missing weights {path / stem}.json; run 'matres pretrain' first")
    return PriorBackbone.load(path / MATCHER_STEM), Restorer.load(path / RESTORER_STEM)


# --- adapt ------------------------------------------------------------------------------------

def run_pair(pair: synth.Pair, matcher: PriorBackbone, restorer: Restorer, cfg: dict, run_dir: Path,
             with_baseline: bool) -> dict:
    """Adapt one pair and write its run directory; returns the result record."""
    run_dir.mkdir(parents=True, exist_ok=True)
    acfg = cfgmod.adapt_config(cfg)
    res = tta.adapt(pair.lq, pair.hq, matcher, restorer, acfg)
    hw = pair.hq.shape[:2]
    grid = cfg["control_grid"]
    err = evalkit.corner_errors(res.transform, pair.truth.transform, hw, grid)
    record = {
        "pair_id": pair.pair_id,
        "transform_est": res.transform.ravel().tolist(),
        "transform_gt": np.asarray(pair.truth.transform).ravel().tolist(),
        "mee": err.mee,
        "mae": err.mae,
        "acceptable": err.acceptable,
        "stop_reason": res.stop_reason,
        "iterations": res.iterations,
        "psnr_baseline": None, "psnr_adapted": None, "ssim_baseline": None, "ssim_adapted": None,
        "mee_baseline": None, "mae_baseline": None, "transform_baseline": None, "acceptable_baseline": None,
        "weights": {"matcher": matcher.params.digest(), "restorer": restorer.params.digest()},
    }
    if with_baseline:
        T_base, restored_base, mask_base = tta.baseline(pair.lq, pair.hq, matcher, restorer, acfg)
        mask = mask_base & res.mask
        base_err = evalkit.corner_errors(T_base, pair.truth.transform, hw, grid)
        record.update({
            "psnr_baseline": evalkit.psnr(restored_base, pair.hq, mask),
            "psnr_adapted": evalkit.psnr(res.restored, pair.hq, mask),
            "ssim_baseline": evalkit.ssim(restored_base, pair.hq, mask),
            "ssim_adapted": evalkit.ssim(res.restored, pair.hq, mask),
            "mee_baseline": base_err.mee, "mae_baseline": base_err.mae,
            "transform_baseline": T_base.ravel().tolist(),
            "acceptable_baseline": base_err.acceptable,
        })
    else:
        record["psnr_adapted"] = evalkit.psnr(res.restored, pair.hq, res.mask)
        record["ssim_adapted"] = evalkit.ssim(res.restored, pair.hq, res.mask)
    (run_dir / "result.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    (run_dir / "trace.csv").write_text(res.trace.to_csv())
    imageio.save_png(run_dir / "restored.png", res.restored)
    imageio.draw_overlay(run_dir / "overlay.png", pair.hq, pair.lq.shape[:2], pair.truth.transform, res.transform)
    res.adapter.save(run_dir / "adapter")
    (run_dir / "config.txt").write_text(cfgmod.dump(cfg) + f"pair_id = {pair.pair_id}\n"
                                        f"matcher_sha256 = {record['weights']['matcher']}\n"
                                        f"restorer_sha256 = {record['weights']['restorer']}\n")
    return record


def _adapt_worker(job) -> tuple[str, str | None]:
    pair, models_dir, cfg, run_dir, with_baseline = job
    try:
        matcher, restorer = _load_models(models_dir)
        run_pair(pair, matcher, restorer, cfg, Path(run_dir), with_baseline)
        return pair.pair_id, None
    except Exception:  # one failing pair must not stop the corpus run
        msg = traceback.format_exc()
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "error.txt").write_text(msg)
        return pair.pair_id, msg


def cmd_adapt(args) -> int:
    cfg = _resolved(args)
    pairs = _load_corpus(args.corpus)
    _load_models(args.models)  # fail fast on missing weights
    if args.pairs is not None:
        if args.pairs < 1:
            raise UsageError("--pairs must be >= 1")
        pairs = pairs[:args.pairs]
    runs = Path(args.runs)
    if runs.exists() and any(runs.iterdir()):
        if not args.force:
            raise UsageError(f"{runs} is not empty; pass --force to overwrite")
        shutil.rmtree(runs)
    runs.mkdir(parents=True, exist_ok=True)
    jobs = [(p, str(args.models), cfg, str(runs / p.pair_id), args.with_baseline) for p in pairs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_adapt_worker, jobs))
    else:
        outcomes = [_adapt_worker(j) for j in jobs]
    failed = [pid for pid, msg in outcomes if msg is not None]
    for pid, msg in outcomes:
        print(f"{pid}: {'FAILED' if msg else 'ok'}")
    (runs / "config.txt").write_text(cfgmod.dump(cfg))
    if failed:
        print(f"{len(failed)} of {len(pairs)} pairs failed: {', '.join(failed)}", file=sys.stderr)
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------------------

def collect_report(runs: Path) -> tuple[evalkit.EvalReport, list[dict]]:
    if not runs.is_dir():
        raise UsageError(f"run directory not found: {runs}")
    rows, records, missing = [], [], []
    for d in sorted(p for p in runs.iterdir() if p.is_dir()):
        result = d / "result.json"
        if not result.exists():
            missing.append(d.name)
            continue
        r = json.loads(result.read_text())
        if r.get("psnr_baseline") is None:
            missing.append(f"{d.name} (no baseline)")
            continue
        records.append(r)
        rows.append(evalkit.PairMetrics(
            r["pair_id"], r["psnr_baseline"], r["psnr_adapted"], r["ssim_baseline"], r["ssim_adapted"],
            r["mee_baseline"], r["mae_baseline"], r["mee"], r["mae"], r["acceptable_baseline"], r["acceptable"],
            r["stop_reason"], r["iterations"]))
    if not rows:
        raise UsageError(f"no completed runs with baseline metrics under {runs}")
    return evalkit.EvalReport(rows, missing), records


def _plot_curves(runs: Path, pair_ids: list[str], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for pid in pair_ids:
        trace = np.genfromtxt(runs / pid / "trace.csv", delimiter=",", names=True)
        trace = np.atleast_1d(trace)
        axes[0].plot(trace["iteration"], trace["l_d"] / trace["l_d"][0], lw=0.8)
        axes[1].plot(trace["iteration"], trace["l_p"], lw=0.8)
    axes[0].set(title="off-diagonal loss (relative to iteration 0)", xlabel="iteration")
    axes[1].set(title="pixel loss", xlabel="iteration", yscale="log")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _overlay_montage(runs: Path, pair_ids: list[str], path: Path, columns: int = 5) -> None:
    from PIL import Image

    tiles = [Image.open(runs / pid / "overlay.png").convert("RGB") for pid in pair_ids
             if (runs / pid / "overlay.png").exists()]
    if not tiles:
        return
    w, h = tiles[0].size
    rows = -(-len(tiles) // columns)
    sheet = Image.new("RGB", (w * min(columns, len(tiles)), h * rows))
    for k, tile in enumerate(tiles):
        sheet.paste(tile, ((k % columns) * w, (k // columns) * h))
    sheet.save(path)


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    runs = Path(args.runs)
    report, _ = collect_report(runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taus = np.arange(1, cfg["auc_max_px"] + 1)
    summary = report.summary()
    summary["without"]["mauc"] = evalkit.mauc([p.mae_baseline for p in report.pairs], taus)
    summary["with"]["mauc"] = evalkit.mauc([p.mae for p in report.pairs], taus)
    body = {"summary": summary, "pairs": json.loads(report.to_json())["pairs"]}
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=float) + "\n")
    (out / "report.csv").write_text(report.to_csv())
    ids = [p.pair_id for p in report.pairs]
    _plot_curves(runs, ids, out / "loss_curves.png")
    _overlay_montage(runs, ids, out / "overlays.png")
    w, m = summary["without"], summary["with"]
    print(f"{'':<10}{'mAUC':>8}{'PSNR':>8}{'SSIM':>8}")
    print(f"{'w/o':<10}{w['mauc']:>8.2f}{w['psnr']:>8.2f}{w['ssim']:>8.3f}")
    print(f"{'w/':<10}{m['mauc']:>8.2f}{m['psnr']:>8.2f}{m['ssim']:>8.3f}")
    print(f"median dPSNR {summary['median_delta_psnr']:+.3f} dB, median dMAE {summary['median_delta_mae']:+.3f} px")
    if report.missing:
        print(f"missing runs: {', '.join(report.missing)}", file=sys.stderr)
    return EXIT_OK


# --- gradcheck ---------------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = run_suite(extra=[tta.end_to_end_gradcheck])
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(r.op for r in failed)}", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matres", description="Mutual matching/restoration test-time adaptation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("synth", help="generate a seeded LQ/HQ corpus")
    p.add_argument("out")
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain the stand-in matcher and restorer on a corpus")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run test-time adaptation on every corpus pair")
    p.add_argument("corpus")
    p.add_argument("models")
    p.add_argument("runs")
    p.add_argument("--pairs", type=int)
    p.add_argument("--with-baseline", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="aggregate run directories into reports and plots")
    p.add_argument("runs")
    p.add_argument("out")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.set_defaults(func=cmd_gradcheck, config=None, override=[])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, FileNotFoundError) as exc:
        print(f"matres: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GateError, tta.GradientLeakError) as exc:
        print(f"matres: gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
