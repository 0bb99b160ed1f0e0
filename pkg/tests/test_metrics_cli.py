import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hscat import cli, metrics
from hscat.checkpoint import Checkpoint
from hscat.codec import CompressionModel
from hscat.config import ModelConfig
from hscat.data import read_image, synthetic_images, write_corpus, write_ppm
from hscat.evaluation import EvalReport, ImageResult, evaluate_images

# --- metrics ------------------------------------------------------------------


def test_psnr_examples():
    x = np.zeros((4, 4, 3))
    assert metrics.psnr(x, x + 1 / 255) == pytest.approx(48.1308, abs=1e-4)
    assert metrics.psnr(x, x + 0.5) == pytest.approx(6.0206, abs=1e-4)
    assert metrics.psnr(x, x) == math.inf
    assert metrics.format_psnr(math.inf) == "inf"
    with pytest.raises(ValueError):
        metrics.psnr(x, x[:2])


def test_bpp_examples():
    assert metrics.bpp(b"\0" * 1000, 100, 100) == pytest.approx(0.8)
    assert metrics.bpp(96, 768, 512) == pytest.approx(8 * 96 / (768 * 512))


def test_report_means_and_sentinel(tmp_path):
    rep = EvalReport([ImageResult("b", 0.5, 30.0), ImageResult("a", 1.5, math.inf), ImageResult("c", 1.0, 34.0)])
    assert rep.mean_bpp == pytest.approx(1.0)
    assert rep.mean_psnr == pytest.approx(32.0)
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["name", "bpp", "psnr_db"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "c", "mean"]
    assert rows[1][2] == "inf"
    assert EvalReport([ImageResult("x", 1.0, math.inf)]).mean_psnr == math.inf


def test_eval_independent_of_image_order():
    model = CompressionModel(ModelConfig.tiny())
    imgs = synthetic_images(3, 64, seed=6)
    names = ["a", "b", "c"]
    fwd = evaluate_images(imgs, model, names)
    rev = evaluate_images(imgs[::-1], model, names[::-1])
    assert {r.name: (r.bpp, r.psnr_db) for r in fwd.results} == {r.name: (r.bpp, r.psnr_db) for r in rev.results}
    assert fwd.mean_bpp == rev.mean_bpp


# --- config parsing -------------------------------------------------------------


def test_config_text():
    cfg = cli.parse_config_text("""
        # toy run
        lambda = 0.05
        steps = 12
        lr_base = 1e-3
        [model]
        casa_enabled = false
        ffn_variant = "plain_ffn"
    """)
    assert cfg.lam == 0.05 and cfg.steps == 12 and cfg.lr_base == 1e-3
    assert not cfg.model.casa_enabled and cfg.model.ffn_variant == "plain_ffn"
    assert cfg.model.channels == ModelConfig.tiny().channels
    assert cli.parse_config_text("preset = default\nmodel.seed = 3").model.channels == ModelConfig().channels
    for bad in ("lambda", "preset = huge", "[model]\nwidth = 3", "lambda = -1", "crop = 50"):
        with pytest.raises(cli.UsageError):
            cli.parse_config_text(bad)


# --- command line ---------------------------------------------------------------


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    write_corpus(data, synthetic_images(2, 64, seed=21))
    write_ppm(data / "odd.ppm", synthetic_images(1, 64, seed=22)[0][:40, :56])
    cfgs = []
    for lam in (0.0035, 0.05):
        p = root / f"lam{lam}.cfg"
        p.write_text(f"lambda = {lam}\nsteps = 3\nseed = 1\n")
        cfgs.append(p)
    return root, data, cfgs


def test_cli_end_to_end(workspace, capsys):
    root, data, cfgs = workspace
    train_data = root / "train"
    write_corpus(train_data, synthetic_images(2, 64, seed=23))
    ckpts = []
    for cfg in cfgs:
        out = root / (cfg.stem + ".ckpt")
        code, stdout, err = _run(capsys, "train", "--config", cfg, "--data", train_data, "--out", out)
        assert code == 0, err
        assert "step 3" in stdout
        rows = list(csv.reader(open(f"{out}.log.csv")))
        assert rows[0] == ["step", "loss", "bpp", "mse", "psnr", "lr"] and len(rows) == 4
        ckpts.append(out)

    code, _, err = _run(capsys, "train", "--config", cfgs[0], "--data", train_data, "--out", ckpts[0],
                        "--resume", "--steps", "5")
    assert code == 0, err
    assert Checkpoint.load(ckpts[0]).step == 5
    assert len(list(csv.reader(open(f"{ckpts[0]}.log.csv")))) == 6

    src = data / "odd.ppm"
    code, stdout, _ = _run(capsys, "compress", "--model", ckpts[1], "--in", src, "--out", root / "odd.hsc")
    assert code == 0 and "bpp" in stdout
    code, _, _ = _run(capsys, "decompress", "--model", ckpts[1], "--in", root / "odd.hsc", "--out", root / "odd.out.ppm")
    assert code == 0
    assert read_image(root / "odd.out.ppm").shape == read_image(src).shape

    code, _, _ = _run(capsys, "eval", "--model", ckpts[1], "--data", data, "--report", root / "report.csv")
    assert code == 0
    rows = list(csv.reader(open(root / "report.csv")))
    assert rows[0] == ["name", "bpp", "psnr_db"]
    assert [r[0] for r in rows[1:]] == ["img000.ppm", "img001.ppm", "odd.ppm", "mean"]

    prefix = root / "rd"
    code, _, err = _run(capsys, "rd-curve", "--models", f"{ckpts[0]},{ckpts[1]}", "--data", data, "--out", prefix)
    assert code == 0, err
    rows = list(csv.reader(open(f"{prefix}.csv")))
    assert rows[0] == ["lambda", "mean_bpp", "mean_psnr_db"]
    assert len(rows) == 3
    bpps = [float(r[1]) for r in rows[1:]]
    assert bpps == sorted(bpps)
    svg = ET.parse(f"{prefix}.svg").getroot()
    assert svg.tag.endswith("svg")
    assert len([e for e in svg.iter() if e.tag.endswith("circle")]) == 2


def _assert_error(code, err, expected):
    assert code == expected
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")


def test_cli_usage_errors(capsys, workspace):
    root, data, _ = workspace
    _assert_error(*_run(capsys, "compress", "--model", "x")[::2], 2)
    _assert_error(*_run(capsys, "bogus")[::2], 2)
    bad_cfg = root / "bad.cfg"
    bad_cfg.write_text("lambda = 0\n")
    _assert_error(*_run(capsys, "train", "--config", bad_cfg, "--data", data, "--out", root / "x.ckpt")[::2], 2)


def test_cli_data_errors(capsys, workspace, tmp_path):
    root, data, _ = workspace
    model = CompressionModel(ModelConfig.tiny())
    model.lam = 0.013
    ck = tmp_path / "m.ckpt"
    Checkpoint.from_model(model).save(ck)
    junk = tmp_path / "junk.hsc"
    junk.write_bytes(b"HSCB garbage")
    _assert_error(*_run(capsys, "decompress", "--model", ck, "--in", junk, "--out", tmp_path / "o.ppm")[::2], 3)
    _assert_error(*_run(capsys, "compress", "--model", ck, "--in", tmp_path / "none.ppm",
                        "--out", tmp_path / "o.hsc")[::2], 3)
    empty = tmp_path / "empty"
    empty.mkdir()
    _assert_error(*_run(capsys, "train", "--data", empty, "--out", tmp_path / "t.ckpt")[::2], 3)
    _assert_error(*_run(capsys, "rd-curve", "--models", f"{ck},{ck}", "--data", data, "--out", tmp_path / "rd")[::2], 2)


def test_cli_model_errors(capsys, workspace, tmp_path):
    root, data, _ = workspace
    a, b = CompressionModel(ModelConfig.tiny()), CompressionModel(ModelConfig.tiny(seed=7))
    a.lam = b.lam = 0.013
    ca, cb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    Checkpoint.from_model(a).save(ca)
    Checkpoint.from_model(b).save(cb)
    stream = tmp_path / "s.hsc"
    assert _run(capsys, "compress", "--model", ca, "--in", data / "img000.ppm", "--out", stream)[0] == 0
    _assert_error(*_run(capsys, "decompress", "--model", cb, "--in", stream, "--out", tmp_path / "o.ppm")[::2], 4)
    _assert_error(*_run(capsys, "eval", "--model", tmp_path / "missing.ckpt", "--data", data,
                        "--report", tmp_path / "r.csv")[::2], 4)
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    _assert_error(*_run(capsys, "compress", "--model", tmp_path / "bad.ckpt", "--in", data / "img000.ppm",
                        "--out", stream)[::2], 4)
