import json

import pytest

from matres import cli, models


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory, pretrained):
    out = tmp_path_factory.mktemp("models")
    matcher, restorer = pretrained
    matcher.save(out / cli.MATCHER_STEM)
    restorer.save(out / cli.RESTORER_STEM)
    return out


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["synth", str(out), "-o", "n_pairs=2"]) == 0
    return out


def test_synth_writes_corpus_and_refuses_overwrite(small_corpus, capsys):
    manifest = json.loads((small_corpus / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 2 and (small_corpus / "pair_000_lq.png").exists()
    assert "n_pairs = 2" in (small_corpus / "config.txt").read_text()
    assert cli.main(["synth", str(small_corpus), "-o", "n_pairs=2"]) == 1
    assert "--force" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["synth", "X", "-o", "n_pairs=0"], ["synth", "X", "-o", "nope=1"],
                                  ["synth", "X", "--config", "missing.cfg"], ["bogus"], []])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_pretrain_gate_failure_exits_two(small_corpus, tmp_path):
    argv = ["pretrain", str(small_corpus), str(tmp_path / "m"), "-o", "matcher_steps=1", "-o", "denoiser_steps=1",
            "-o", "restorer_steps=0"]
    assert cli.main(argv) == 2


def test_pretrain_writes_weights(small_corpus, tmp_path, pretrained, monkeypatch):
    monkeypatch.setattr(models, "pretrain_models", lambda pairs, cfg: pretrained)
    out = tmp_path / "m"
    assert cli.main(["pretrain", str(small_corpus), str(out)]) == 0
    assert (out / "matcher.bin").exists() and (out / "restorer.json").exists()
    assert cli.main(["pretrain", str(small_corpus), str(out)]) == 1


def test_adapt_and_eval(small_corpus, model_dir, tmp_path, capsys):
    runs = tmp_path / "runs"
    argv = ["adapt", str(small_corpus), str(model_dir), str(runs), "--with-baseline", "-o", "t_max=3"]
    assert cli.main(argv) == 0
    result = json.loads((runs / "pair_000" / "result.json").read_text())
    for key in ("transform_est", "transform_gt", "mee", "mae", "acceptable", "stop_reason", "iterations",
                "psnr_baseline", "psnr_adapted", "weights"):
        assert key in result
    assert result["iterations"] <= 3
    for name in ("trace.csv", "restored.png", "overlay.png", "adapter.bin", "config.txt"):
        assert (runs / "pair_001" / name).exists()
    assert cli.main(argv) == 1

    report_dir = tmp_path / "report"
    assert cli.main(["eval", str(runs), str(report_dir)]) == 0
    report = json.loads((report_dir / "report.json").read_text())
    assert report["summary"]["n_pairs"] == 2
    for name in ("report.csv", "loss_curves.png", "overlays.png"):
        assert (report_dir / name).exists()
    assert "psnr" in capsys.readouterr().out.lower()


def test_adapt_without_models_exits_one(small_corpus, tmp_path):
    assert cli.main(["adapt", str(small_corpus), str(tmp_path / "none"), str(tmp_path / "runs")]) == 1


def test_eval_on_empty_runs(tmp_path):
    (tmp_path / "runs").mkdir()
    assert cli.main(["eval", str(tmp_path / "runs"), str(tmp_path / "out")]) == 1
