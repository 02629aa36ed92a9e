import csv
import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from stdai import cli
from stdai import pipeline as pl
from stdai.data import PhantomConfig, normalize_expression, synth_phantom
from stdai.errors import ConfigError

TINY = {"train": {"epochs_pretrain": 3, "epochs_fmdr": 2}, "phantom": {"height": 48, "width": 48}}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def _only_dir(root):
    dirs = [d for d in Path(root).iterdir() if d.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


def test_parser_has_every_subcommand():
    p = cli.build_parser()
    for name in ("synth", "sample", "align", "pretrain", "refine", "infer", "eval", "run", "ablate"):
        assert p.parse_args([name]).command == name


def test_config_defaults_and_toggles(tiny):
    cfg = cli.load_config()
    assert cfg.toggles == {t: True for t in pl.TOGGLES}
    assert cfg.train.epochs_pretrain == 500 and cfg.train.epochs_fmdr == 1000 and cfg.train.lr0 == 1e-3
    cfg = cli.load_config(tiny, seed=4, toggles="csa,dco", literal_eq5=True)
    assert cfg.toggles == {"csa": True, "fmdr": False, "pdl": False, "csg": False, "dco": True}
    assert cfg.train.seed == 4 and cfg.phantom.seed == 4 and cfg.train.literal_eq5
    assert cli.load_config(tiny, toggles="").toggles == {t: False for t in pl.TOGGLES}


def test_config_hash_tracks_content(tiny):
    a = cli.load_config(tiny, seed=1)
    assert a.digest() == cli.load_config(tiny, seed=1).digest()
    assert a.digest() != cli.load_config(tiny, seed=2).digest()
    assert a.digest() != cli.load_config(tiny, seed=1, toggles="csa").digest()


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"train": {"epochs_fmdr": -1}}, {"train": {"lr0": 0}},
                                 {"phantom": {"height": 8}}, {"population": "some"}])
def test_config_errors(tmp_path, raw):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(ConfigError):
        cli.load_config(str(p))


def test_exit_codes_and_no_overwrite(tiny, tmp_path, capsys):
    out = str(tmp_path / "o")
    assert cli.main(["run", "--config", tiny, "--seed", "1", "--out", out]) == 0
    assert cli.main(["run", "--config", tiny, "--seed", "1", "--out", out]) == 2
    assert "refusing to overwrite" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["run", "--config", tiny, "--toggle", "warp"]) == 2
    assert cli.main(["pretrain", "--config", tiny, "--out", out]) == 2  # no bundle


def test_registration_failure_names_stage(tiny, tmp_path, monkeypatch, capsys):
    from stdai.errors import DegenerateConfigurationError

    def degenerate(*a, **k):
        raise DegenerateConfigurationError("all matches are collinear")
    monkeypatch.setattr(pl, "register", degenerate)
    assert cli.main(["run", "--config", tiny, "--out", str(tmp_path / "o")]) == 3
    assert "stage 'align' failed: all matches are collinear" in capsys.readouterr().err


def test_stage_failure_keeps_partial(tiny, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("diverged")
    monkeypatch.setattr(pl, "fmdr_refine", boom)
    out = tmp_path / "o"
    assert cli.main(["run", "--config", tiny, "--out", str(out)]) == 3
    assert "'refine'" in capsys.readouterr().err
    d = _only_dir(out)
    assert d.name.endswith(".partial")
    assert (d / "section_0.theta0.ckpt").exists()


def test_run_deterministic(tiny, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["run", "--config", tiny, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a, b = _only_dir(tmp_path / "a"), _only_dir(tmp_path / "b")
    assert a.name == b.name
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert any(str(f) == "metrics.csv" for f in files)
    assert sum(str(f).endswith(".ckpt") for f in files) == 3
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_staged_commands_match_run(tiny, tmp_path):
    out = str(tmp_path / "s")
    common = ["--config", tiny, "--seed", "3", "--out", out]

    def step(*argv):
        assert cli.main(list(argv) + common) == 0

    step("synth")
    bundle = next(Path(out).glob("*/bundle"))
    step("sample", "--bundle", str(bundle))
    stage_root = next(Path(out).glob("*-s3"))
    sampled = stage_root / "sample" / "bundle"
    step("pretrain", "--bundle", str(sampled))
    step("refine", "--bundle", str(sampled))
    step("infer", "--bundle", str(sampled))
    step("eval", "--bundle", str(sampled), "--pred", str(stage_root / "infer" / "volume"))
    assert cli.main(["run", "--config", tiny, "--seed", "3", "--out", str(tmp_path / "r")]) == 0
    staged = (stage_root / "eval" / "metrics.csv").read_bytes()
    assert staged == (_only_dir(tmp_path / "r") / "metrics.csv").read_bytes()


def test_align_writes_transforms(tiny, tmp_path):
    out = str(tmp_path / "s")
    assert cli.main(["synth", "--config", tiny, "--out", out]) == 0
    bundle = next(Path(out).glob("*/bundle"))
    assert cli.main(["align", "--bundle", str(bundle), "--config", tiny, "--out", out]) == 0
    report = json.loads(next(Path(out).glob("*/align/align.json")).read_text())
    assert len(report["0"]["transform"]) == 6


def _ablate(tiny, out, monkeypatch, threads="1"):
    monkeypatch.setenv("STDAI_THREADS", threads)
    assert cli.main(["ablate", "--config", tiny, "--seed", "2", "--out", str(out)]) == 0
    path = next(Path(out).glob("*/ablate/ablation.csv"))
    return path.read_text()


def test_ablation_table(tiny, tmp_path, monkeypatch):
    text = _ablate(tiny, tmp_path / "a", monkeypatch)
    rows = list(csv.DictReader(text.splitlines()))
    assert [r["config"] for r in rows] == [n for n, _ in cli.ABLATION_ROWS]
    assert len(rows) == 7
    for m in ("psnr", "ssim", "mae", "pcc"):
        assert all(np.isfinite(float(r[f"{m}_mean"])) for r in rows)
    assert rows[0]["csa"] == "0" and rows[-1]["dco"] == "1"
    assert _ablate(tiny, tmp_path / "b", monkeypatch, threads="3") == text


@pytest.mark.parametrize("bits", list(itertools.product((0, 1), repeat=5)))
def test_every_toggle_combination_runs(bits):
    smp = normalize_expression(synth_phantom(PhantomConfig(height=48, width=48, seed=5)))
    cfg = pl.TrainConfig(epochs_pretrain=1, epochs_fmdr=1, seed=5)
    results, vol = pl.run_sample(smp, cfg, dict(zip(pl.TOGGLES, bits)))
    assert np.all(np.isfinite(vol.volume))
