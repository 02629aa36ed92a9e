"""Reconstruction metrics on normalized expression maps.

All metrics take an optional boolean ``population`` mask selecting the
pixels that count; by default evaluation is restricted to unobserved pixels
because observed ones are exact after data consistency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import gaussian_kde

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _select(pred, truth, population):
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if population is None:
        return pred.ravel(), truth.ravel()
    pop = np.asarray(population).astype(bool)
    if not pop.any():
        raise ValueError("empty pixel population")
    return pred[pop], truth[pop]


def psnr(pred, truth, peak=1.0, population=None):
    """``10 log10(peak^2 / MSE)`` in dB; ``math.inf`` when MSE is zero."""
    p, t = _select(pred, truth, population)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mae(pred, truth, population=None):
    p, t = _select(pred, truth, population)
    return float(np.mean(np.abs(p - t)))


def pcc(pred, truth, population=None):
    p, t = _select(pred, truth, population)
    pc, tc = p - p.mean(), t - t.mean()
    sp, st = float(np.sum(pc * pc)), float(np.sum(tc * tc))
    if sp == 0:
        raise ValueError("pcc undefined: prediction is constant")
    if st == 0:
        raise ValueError("pcc undefined: truth is constant")
    return float(np.sum(pc * tc) / math.sqrt(sp * st))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(pred, truth, data_range=1.0):
    """Local SSIM at every window centre whose window lies fully inside the image."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(truth, np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim needs equal single-channel maps, got {x.shape} and {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def blur(a):
        a = ndimage.correlate1d(a, g, axis=0, mode="constant")
        a = ndimage.correlate1d(a, g, axis=1, mode="constant")
        return a[half:-half, half:-half]

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(pred, truth, population=None, data_range=1.0):
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) over window centres in ``population``."""
    smap = ssim_map(pred, truth, data_range)
    if population is None:
        return float(smap.mean())
    half = SSIM_WINDOW // 2
    pop = np.asarray(population).astype(bool)[half:-half, half:-half]
    if not pop.any():
        raise ValueError("no population pixel has a full SSIM window")
    return float(smap[pop].mean())


@dataclass
class MetricsReport:
    genes: list
    population: str
    psnr: list
    ssim: list
    mae: list
    pcc: list
    summary: dict = field(default_factory=dict)

    def rows(self, section):
        for i, g in enumerate(self.genes):
            yield {"section": section, "gene": g, "population": self.population,
                   "psnr_db": self.psnr[i], "ssim": self.ssim[i], "mae": self.mae[i], "pcc": self.pcc[i]}


def evaluate(pred, truth, observed_mask, genes, population="unobserved"):
    """Per-gene metrics plus mean and SD across genes.

    ``population`` is ``"unobserved"`` (default) or ``"all"``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if population == "unobserved":
        pop = ~np.asarray(observed_mask).astype(bool)
    elif population == "all":
        pop = np.ones(truth.shape[1:], bool)
    else:
        raise ValueError(f"unknown population {population!r}")
    vals = {"psnr": [], "ssim": [], "mae": [], "pcc": []}
    for g in range(truth.shape[0]):
        vals["psnr"].append(psnr(pred[g], truth[g], population=pop))
        vals["ssim"].append(ssim(pred[g], truth[g], population=pop))
        vals["mae"].append(mae(pred[g], truth[g], population=pop))
        vals["pcc"].append(pcc(pred[g], truth[g], population=pop))
    with np.errstate(invalid="ignore"):  # inf PSNR gives a nan SD
        summary = {k: (float(np.mean(v)), float(np.std(v))) for k, v in vals.items()}
    return MetricsReport(list(genes), population, summary=summary, **vals)


METRICS_COLUMNS = ["section", "gene", "population", "psnr_db", "ssim", "mae", "pcc"]


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})


def write_error_map(path, pred, truth):
    """|pred - truth| x 255 as an 8-bit PGM."""
    err = np.abs(np.asarray(pred, np.float64) - np.asarray(truth, np.float64))
    img = np.clip(np.rint(err * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def expression_density(values, bins=64, value_range=None):
    """Area-normalized histogram and a Gaussian-KDE density at the bin centres.

    Returns ``(centers, histogram, smoothed)``.
    """
    v = np.asarray(values, np.float64).ravel()
    if np.unique(v).size < 2:
        raise ValueError("density needs at least two distinct values")
    hist, edges = np.histogram(v, bins=bins, range=value_range, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    smooth = gaussian_kde(v)(centers)
    return centers, hist, smooth


def write_density_csv(path, centers, density):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "density"])
        for c, d in zip(centers, density):
            w.writerow([repr(float(c)), repr(float(d))])
