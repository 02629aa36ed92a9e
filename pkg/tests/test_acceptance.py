"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""

import dataclasses
import itertools
import math
import shutil
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from stdai.alignment import detect_keypoints, estimate_transform_ransac, match_descriptors
from stdai.backbone import BackboneConfig, extract_histology_features, init_params, model_forward
from stdai.csg import confidence_map, finalize_confidence, observed_confidence, propagate_confidence
from stdai.data import PhantomConfig, apply_transform, normalize_expression, synth_phantom
from stdai.metrics import evaluate, mae, pcc, psnr, ssim
from stdai.pdl import insert_pdls, trainable_subset
from stdai.pipeline import TrainConfig, run_sample
from stdai.sampling import make_grid_mask
from oracles import (bicubic_upsample_loop, mae_direct, pcc_direct, psnr_direct, ssim_direct)
from test_autograd import _composite_case, _gradcheck, _primitive_cases

FULL = {"csa": True, "fmdr": True, "pdl": True, "csg": True, "dco": True}
ABLATION_SEEDS = (0, 1, 2)


@contextmanager
def criterion(capsys, n, title):
    detail = {}
    try:
        yield detail
    except BaseException:
        with capsys.disabled():
            print(f"\n[FAIL] criterion {n}: {title} {detail.get('msg', '')}".rstrip())
        raise
    with capsys.disabled():
        print(f"\n[PASS] criterion {n}: {title} {detail.get('msg', '')}".rstrip())


# -- 1 ---------------------------------------------------------------------------

def test_c01_pdl_identity(capsys):
    with criterion(capsys, 1, "zero-init PDL insertion leaves outputs unchanged (1e-6 rel)") as d:
        cfg = BackboneConfig()
        worst = 0.0
        for seed in range(3):
            smp = synth_phantom(PhantomConfig(seed=seed))
            adj = smp.adjacent_sections()[0]
            h = adj.histology_float()
            feats = extract_histology_features(h, cfg)
            p = init_params(cfg, seed)
            base = model_forward(p, h, adj.expression, adj.mask, feats)
            for sites in (None, ["bott"], ["enc0", "dec0"]):
                out = model_forward(insert_pdls(p, sites), h, adj.expression, adj.mask, feats)
                worst = max(worst, float(np.max(np.abs(out - base)) / np.max(np.abs(base))))
        d["msg"] = f"(max rel change {worst:.1e})"
        assert worst <= 1e-6


# -- 2 ---------------------------------------------------------------------------

def test_c02_parameter_efficiency(capsys):
    with criterion(capsys, 2, "FMDR trainable scalars < 5% of total, count pinned") as d:
        theta0 = init_params(BackboneConfig())
        theta1 = trainable_subset(theta0.copy(share=("backbone",)), "fmdr_central")
        theta2 = trainable_subset(insert_pdls(theta0.copy(share=("backbone",))), "fmdr_adjacent")
        trainable = theta1.count(trainable_only=True) + theta2.count(trainable_only=True)
        total = theta0.count() + theta1.count("head") + theta2.count("pdl")
        d["msg"] = f"({trainable} of {total} = {100 * trainable / total:.2f}%)"
        assert theta0.count() == 61356
        assert trainable == 456 == 68 + 68 + 320
        assert trainable < 0.05 * total


# -- 3 ---------------------------------------------------------------------------

def test_c03_gradient_correctness(capsys):
    with criterion(capsys, 3, "autodiff vs central differences < 1e-3 (all primitives + composite, 3 seeds)") as d:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(3):
            rng = np.random.default_rng(seed)
            for _, params, build in _primitive_cases(rng):
                worst = max(worst, _gradcheck(build, params, abs_floor=0.0))
            params, build = _composite_case(rng)
            worst = max(worst, _gradcheck(build, params, abs_floor=0.0))
        elapsed = time.perf_counter() - t0
        d["msg"] = f"(max rel err {worst:.1e}, {elapsed:.1f}s)"
        assert worst < 1e-3
        assert elapsed < 60


# -- shared end-to-end runs (criteria 4, 9, 11) ------------------------------------

@pytest.fixture(scope="module")
def ablation_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in ABLATION_SEEDS:
        smp = normalize_expression(synth_phantom(PhantomConfig(seed=seed)))
        cfg = TrainConfig(seed=seed)
        adj = smp.adjacent_sections()[0]
        cache = {}
        base, _ = run_sample(smp, cfg, {}, cache)
        run_sample(smp, dataclasses.replace(cfg, epochs_fmdr=0), {"csa": True}, cache)
        theta0 = cache[(adj.index, True)][2]
        frozen = {n: theta0.tensors[n].tobytes() for n in theta0.names("backbone")}
        full, _ = run_sample(smp, cfg, FULL, cache)
        nocsg, _ = run_sample(smp, cfg, dict(FULL, csg=False), cache)
        r = full[0]
        nodco = evaluate(r.pred, adj.truth, adj.mask, smp.genes)
        runs.append({"sample": smp, "adj": adj, "theta0": theta0, "frozen": frozen, "base": base[0],
                     "full": r, "nodco": nodco, "nocsg": nocsg[0]})
    elapsed = time.perf_counter() - t0
    return runs, elapsed


# -- 4 ---------------------------------------------------------------------------

def test_c04_dco_exactness(capsys, ablation_runs):
    with criterion(capsys, 4, "DCO keeps 100% of observed pixels bit-equal to measurements") as d:
        runs, _ = ablation_runs
        checked = 0
        results = [(r["adj"], r[k]) for r in runs for k in ("full", "nocsg")]
        smp3 = normalize_expression(synth_phantom(PhantomConfig(n_sections=3, seed=4)))
        res3, vol3 = run_sample(smp3, TrainConfig(epochs_pretrain=20, epochs_fmdr=20, seed=4), FULL)
        results += list(zip(smp3.adjacent_sections(), res3))
        for adj, r in results:
            obs = adj.mask.astype(bool)
            assert r.final[:, obs].tobytes() == adj.expression[:, obs].tobytes()
            checked += int(obs.sum()) * r.final.shape[0]
        for s, v in zip(smp3.sections, vol3.volume):
            obs = s.mask.astype(bool)
            assert v[:, obs].tobytes() == s.expression[:, obs].tobytes()
        d["msg"] = f"({checked} observed values in {len(results)} runs)"


# -- 5 ---------------------------------------------------------------------------

def test_c05_csg_contracts(capsys):
    with criterion(capsys, 5, "CSG unit mean, endpoints, worked example, bicubic oracle") as d:
        worst_mean = 0.0
        for seed, (H, W, G) in enumerate(itertools.product((8, 13, 32), (9, 16), (1, 4))):
            rng = np.random.default_rng(seed)
            grid = make_grid_mask(H, W)
            measured = rng.uniform(size=(G, H, W)) * grid.mask
            pseudo = rng.uniform(size=(G, H, W))
            cm = confidence_map(pseudo, measured, grid)
            worst_mean = max(worst_mean, abs(cm.weights.mean() - 1))
            assert cm.w_obs.min() == 0.0 and cm.w_obs[np.argmax(cm.errors)] == 0.0
        # endpoints: zero error -> 1, maximal error -> 0
        pseudo = np.array([[[0.0, 0.3, 0.9]]])
        _, w = observed_confidence(pseudo, np.zeros_like(pseudo), np.ones((1, 3)))
        assert w[0] == 1.0 and w[2] == 0.0
        # worked 1x4 example
        wt = finalize_confidence(np.array([[0.2, 0.5, 0.9, 0.5]]), np.array([[1, 0, 1, 0]]))
        assert wt.tolist() == [[4 / 3, 2 / 3, 4 / 3, 2 / 3]]
        # bicubic propagation vs loop oracle
        worst_bicubic = 0.0
        for seed, (H, W) in enumerate([(12, 12), (16, 14), (20, 18), (33, 31)]):
            grid = make_grid_mask(H, W)
            nr, nc = grid.lattice_shape
            w = np.random.default_rng(seed).uniform(size=grid.count)
            dense, fallback = propagate_confidence(w, grid)
            assert not fallback
            oracle = np.clip(bicubic_upsample_loop(w.reshape(nr, nc), 2, (0, 0), (H, W)), 0, 1)
            worst_bicubic = max(worst_bicubic, float(np.max(np.abs(dense - oracle))))
        d["msg"] = f"(|mean-1| {worst_mean:.1e}, bicubic err {worst_bicubic:.1e})"
        assert worst_mean <= 1e-6
        assert worst_bicubic <= 1e-5


# -- 6 ---------------------------------------------------------------------------

def test_c06_sampling(capsys):
    with criterion(capsys, 6, "grid fraction exact; one sample per 2x2 block for H,W in 4..9") as d:
        n = 0
        for H, W in itertools.product(range(4, 10), repeat=2):
            g = make_grid_mask(H, W)
            assert g.fraction == math.ceil(H / 2) * math.ceil(W / 2) / (H * W)
            m = g.mask
            for r0 in range(0, H, 2):
                for c0 in range(0, W, 2):
                    assert m[r0:r0 + 2, c0:c0 + 2].sum() == 1
                    n += 1
        d["msg"] = f"({n} blocks checked)"


# -- 7 ---------------------------------------------------------------------------

def test_c07_registration(capsys):
    with criterion(capsys, 7, "registration: mean corner error < 1 px in >= 95 of 100 trials") as d:
        t0 = time.perf_counter()
        corners = np.array([[0, 0], [63, 0], [0, 63], [63, 63]], float)
        good = 0
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            cfg = PhantomConfig(seed=1000 + trial, rotation_deg=float(rng.uniform(-10, 10)),
                                translation=tuple(rng.uniform(-10, 10, size=2)))
            smp = synth_phantom(cfg)
            c, a = smp.central_section, smp.adjacent_sections()[0]
            ka, kb = detect_keypoints(c.histology), detect_keypoints(a.histology)
            matches = match_descriptors(ka, kb)
            src = np.array([[ka[m.a].col, ka[m.a].row] for m in matches]).reshape(-1, 2)
            dst = np.array([[kb[m.b].col, kb[m.b].row] for m in matches]).reshape(-1, 2)
            # pad with random correspondences so inliers are at most half
            n = len(src)
            src = np.vstack([src, rng.uniform(0, 63, (n, 2))])
            dst = np.vstack([dst, rng.uniform(0, 63, (n, 2))])
            try:
                res = estimate_transform_ransac(src, dst, seed=trial)
            except Exception:
                continue
            err = np.linalg.norm(res.transform.apply(corners) - apply_transform(a.true_transform, corners), axis=1)
            good += err.mean() < 1.0
        elapsed = time.perf_counter() - t0
        d["msg"] = f"({good}/100 trials, {elapsed:.0f}s)"
        assert good >= 95
        assert elapsed < 120


# -- 8 ---------------------------------------------------------------------------

def test_c08_metric_oracles(capsys):
    with criterion(capsys, 8, "metrics match direct oracles within 1e-6; closed forms exact") as d:
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            t = rng.uniform(size=(32, 32))
            p = np.clip(t + rng.normal(0, 0.1 + 0.005 * seed, size=t.shape), 0, 1)
            worst = max(worst, abs(psnr(p, t) - psnr_direct(p, t)), abs(mae(p, t) - mae_direct(p, t)),
                        abs(pcc(p, t) - pcc_direct(p, t)), abs(ssim(p, t) - ssim_direct(p, t)))
        t = np.random.default_rng(7).uniform(size=(32, 32))
        assert abs(psnr(t + 0.1, t) - 20.0) < 1e-9
        assert abs(pcc(2 * t + 3, t) - 1) < 1e-9 and abs(pcc(-t, t) + 1) < 1e-9
        assert abs(ssim(t, t) - 1) < 1e-9
        assert psnr(t, t) == math.inf
        d["msg"] = f"(max oracle gap {worst:.1e})"
        assert worst < 1e-6


# -- 9 ---------------------------------------------------------------------------

def test_c09_ablation_directionality(capsys, ablation_runs):
    with criterion(capsys, 9, "full beats baseline by >= 1 dB and >= 0.02 SSIM; DCO and CSG help") as d:
        runs, elapsed = ablation_runs

        def avg(key, metric):
            vals = []
            for r in runs:
                rep = r[key] if key == "nodco" else r[key].report
                vals.append(rep.summary[metric][0])
            return float(np.mean(vals))

        m = {k: (avg(k, "psnr"), avg(k, "ssim")) for k in ("base", "full", "nodco", "nocsg")}
        d["msg"] = (f"(PSNR base {m['base'][0]:.2f} full {m['full'][0]:.2f} no-DCO {m['nodco'][0]:.2f} "
                    f"no-CSG {m['nocsg'][0]:.2f}; SSIM base {m['base'][1]:.3f} full {m['full'][1]:.3f} "
                    f"no-DCO {m['nodco'][1]:.3f} no-CSG {m['nocsg'][1]:.3f}; {elapsed:.0f}s)")
        assert m["full"][0] - m["base"][0] >= 1.0
        assert m["full"][1] - m["base"][1] >= 0.02
        assert m["full"][0] >= m["nodco"][0] and m["full"][1] >= m["nodco"][1]
        assert m["full"][0] >= m["nocsg"][0] and m["full"][1] >= m["nocsg"][1]
        assert elapsed < 600


# -- 10 --------------------------------------------------------------------------

def _stdai():
    exe = shutil.which("stdai")
    return [exe] if exe else [sys.executable, "-m", "stdai.cli"]


def test_c10_determinism(capsys, tmp_path):
    with criterion(capsys, 10, "`stdai run --seed N` twice gives byte-identical metrics and checkpoints") as d:
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"train": {"epochs_pretrain": 60, "epochs_fmdr": 60}}')
        dirs = []
        for name in ("a", "b"):
            subprocess.run(_stdai() + ["run", "--seed", "5", "--config", str(cfg), "--out", str(tmp_path / name)],
                           check=True, capture_output=True)
            dirs.append(next((tmp_path / name).iterdir()))
        a, b = dirs
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".csv", ".ckpt"))
        assert Path("metrics.csv") in files
        assert sum(f.suffix == ".ckpt" for f in files) == 3
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f
        d["msg"] = f"({len(files)} files compared)"


# -- 11 --------------------------------------------------------------------------

def test_c11_freezing(capsys, ablation_runs):
    with criterion(capsys, 11, "backbone tensors bit-identical before/after FMDR") as d:
        runs, _ = ablation_runs
        n = 0
        for r in runs:
            for key in ("full", "nocsg"):
                for params in (r["theta0"], r[key].theta1, r[key].theta2):
                    for name, blob in r["frozen"].items():
                        assert params.tensors[name].tobytes() == blob
                        n += 1
        d["msg"] = f"({n} tensor comparisons)"
