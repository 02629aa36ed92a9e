import math

import numpy as np
import pytest

from stdai.data import PhantomConfig, synth_phantom
from stdai.metrics import (evaluate, expression_density, mae, pcc, psnr, ssim, write_density_csv,
                           write_error_map, write_metrics_csv)
from oracles import mae_direct, pcc_direct, psnr_direct, ssim_direct


def test_psnr_closed_form():
    t = np.zeros((8, 8))
    assert psnr(t + 0.1, t) == pytest.approx(20.0, abs=1e-9)
    assert psnr(t, t) == math.inf


def test_psnr_mse_001():
    t = np.zeros(100)
    p = np.zeros(100)
    p[:1] = 1.0  # MSE = 0.01
    assert psnr(p, t) == pytest.approx(20.0, abs=1e-12)


def test_mae_offset():
    t = np.random.default_rng(0).uniform(size=(10, 10))
    assert mae(t + 0.1, t) == pytest.approx(0.1, abs=1e-12)


def test_pcc_affine_and_negation():
    t = np.random.default_rng(1).uniform(size=(10, 10))
    assert pcc(2 * t + 3, t) == pytest.approx(1.0, abs=1e-9)
    assert pcc(-t, t) == pytest.approx(-1.0, abs=1e-9)


def test_pcc_constant_named():
    with pytest.raises(ValueError, match="prediction is constant"):
        pcc(np.ones(5), np.arange(5.0))
    with pytest.raises(ValueError, match="truth is constant"):
        pcc(np.arange(5.0), np.ones(5))


def test_ssim_identical():
    t = np.random.default_rng(2).uniform(size=(20, 20))
    assert ssim(t, t) == pytest.approx(1.0, abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_ssim_inverted_binary_phantom_negative():
    truth = synth_phantom(PhantomConfig(seed=0)).central_section.expression[0]
    binary = (truth > np.median(truth)).astype(float)
    val = ssim(1 - binary, binary)
    assert val < 0


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_direct_oracles(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(size=(32, 32))
    p = np.clip(t + rng.normal(0, 0.1, size=(32, 32)), 0, 1)
    assert abs(psnr(p, t) - psnr_direct(p, t)) < 1e-6
    assert abs(mae(p, t) - mae_direct(p, t)) < 1e-6
    assert abs(pcc(p, t) - pcc_direct(p, t)) < 1e-6
    assert abs(ssim(p, t) - ssim_direct(p, t)) < 1e-6


def test_population_excludes_observed():
    t = np.zeros((16, 16))
    p = np.zeros((16, 16))
    mask = np.zeros((16, 16), bool)
    mask[::2, ::2] = True
    p[mask] = 5.0  # errors only where observed
    p[1, 1] = 0.1
    assert mae(p, t, population=~mask) == pytest.approx(0.1 / (256 - 64))
    t2 = np.random.default_rng(0).uniform(size=(1, 16, 16))
    p2 = t2.copy()
    p2[0][mask] += 1.0
    rep = evaluate(p2, t2, mask, ["g"], population="unobserved")
    assert rep.mae[0] == 0.0 and rep.psnr[0] == math.inf


def test_report_mean_sd():
    rng = np.random.default_rng(3)
    t = rng.uniform(size=(3, 16, 16))
    p = t + rng.normal(0, 0.05, size=t.shape)
    rep = evaluate(p, t, np.zeros((16, 16)), ["a", "b", "c"], population="all")
    for k in ("psnr", "ssim", "mae", "pcc"):
        v = getattr(rep, k)
        assert rep.summary[k] == (pytest.approx(np.mean(v)), pytest.approx(np.std(v)))
        assert len(v) == 3
    assert all(-1 <= s <= 1 for s in rep.ssim)


def test_density_area_and_determinism():
    rng = np.random.default_rng(0)
    v = rng.uniform(size=(32, 32))
    c, h, s = expression_density(v, bins=20)
    assert np.sum(h * np.diff(c).mean()) == pytest.approx(1.0, abs=1e-6)
    c2, h2, s2 = expression_density(v.copy(), bins=20)
    assert np.array_equal(h, h2) and np.array_equal(s, s2)


def test_density_mode_shift_under_gain():
    p = synth_phantom(PhantomConfig(seed=0, gene_gain=(1.3,), gene_gamma=(1.0,), gene_bias=(0.0,)))
    c = p.central_section.expression[0]
    a = p.adjacent_sections()[0].truth[0]
    rng_ = (0.0, float(max(c.max(), a.max())))
    _, hc, _ = expression_density(c[c > 0.05], bins=32, value_range=rng_)
    _, ha, _ = expression_density(a[a > 0.05], bins=32, value_range=rng_)
    # mean of the density moves up with the gain
    centers = np.linspace(rng_[0], rng_[1], 33)
    mid = 0.5 * (centers[1:] + centers[:-1])
    assert (mid * ha).sum() / ha.sum() > (mid * hc).sum() / hc.sum()


def test_density_needs_two_values():
    with pytest.raises(ValueError):
        expression_density(np.ones(10))


def test_writers(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [{"section": 1, "gene": "g", "population": "unobserved",
                                          "psnr_db": 20.0, "ssim": 0.5, "mae": 0.1, "pcc": 0.9}])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "section,gene,population,psnr_db,ssim,mae,pcc"
    assert lines[1] == "1,g,unobserved,20.0,0.5,0.1,0.9"
    write_error_map(tmp_path / "e.pgm", np.array([[0.5, 2.0]]), np.zeros((1, 2)))
    assert (tmp_path / "e.pgm").read_bytes()[-2:] == bytes([128, 255])
    write_density_csv(tmp_path / "d.csv", [0.5], [1.0])
    assert (tmp_path / "d.csv").read_text() == "bin_center,density\n0.5,1.0\n"
