"""Confidence weights for pseudo labels.

Errors at measured pixels become scores in [0, 1], which are spread over the
whole image by cubic convolution on the sampling lattice. Measured pixels
are then pinned to 1 and the map is rescaled to unit mean, in that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CUBIC_A = -0.5


@dataclass
class ConfidenceMap:
    errors: np.ndarray  # E at observed pixels, flattened in row-major order
    w_obs: np.ndarray
    dense: np.ndarray  # propagated w, before the hard constraint
    weights: np.ndarray  # final unit-mean map
    mask: np.ndarray
    bilinear_fallback: bool = False

    @property
    def n_pixels(self):
        return self.mask.size


def observed_confidence(pseudo, measured, mask):
    """Per observed pixel: ``E = ||pseudo - measured||_2`` over genes and ``1 - E / max E``.

    Returns ``(E, w_obs)`` as flat arrays over observed pixels in row-major
    order. If every error is zero the scores are all 1.
    """
    pseudo = np.asarray(pseudo, np.float64)
    measured = np.asarray(measured, np.float64)
    mask = np.asarray(mask).astype(bool)
    if pseudo.shape != measured.shape or pseudo.shape[1:] != mask.shape:
        raise ValueError(f"shape mismatch: pseudo {pseudo.shape}, measured {measured.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("observed set is empty")
    diff = (pseudo - measured)[:, mask]
    E = np.sqrt((diff * diff).sum(axis=0))
    emax = E.max()
    if emax == 0:
        return E, np.ones_like(E)
    return E, 1.0 - E / emax


def cubic_kernel(s, a=CUBIC_A):
    s = np.abs(s)
    return np.where(
        s <= 1, (a + 2) * s ** 3 - (a + 3) * s ** 2 + 1,
        np.where(s < 2, a * s ** 3 - 5 * a * s ** 2 + 8 * a * s - 4 * a, 0.0))


def _interp_matrix(n_out, n_nodes, spacing, offset, cubic):
    """Rows map lattice values to output pixels; node indices clamp at the edges."""
    u = (np.arange(n_out) - offset) / spacing
    base = np.floor(u).astype(int)
    Wm = np.zeros((n_out, n_nodes))
    taps = range(-1, 3) if cubic else range(0, 2)
    for d in taps:
        idx = base + d
        s = u - idx
        w = cubic_kernel(s) if cubic else np.maximum(0.0, 1.0 - np.abs(s))
        np.add.at(Wm, (np.arange(n_out), np.clip(idx, 0, n_nodes - 1)), w)
    return Wm


def propagate_confidence(w_obs, grid):
    """Dense confidence from lattice scores.

    ``w_obs`` holds one score per lattice node in row-major order (the order
    ``observed_confidence`` produces for a grid mask). Returns
    ``(dense, bilinear_fallback)``; lattices under 4x4 fall back to bilinear.
    """
    nr, nc = grid.lattice_shape
    w_obs = np.asarray(w_obs, np.float64)
    if w_obs.size != nr * nc:
        raise ValueError(f"expected {nr * nc} lattice scores, got {w_obs.size}")
    coarse = w_obs.reshape(nr, nc)
    cubic = nr >= 4 and nc >= 4
    s = grid.spacing
    Ky = _interp_matrix(grid.height, nr, s, grid.offset[0], cubic)
    Kx = _interp_matrix(grid.width, nc, s, grid.offset[1], cubic)
    dense = np.clip(Ky @ coarse @ Kx.T, 0.0, 1.0)
    return dense, not cubic


def finalize_confidence(w, mask):
    """Pin measured pixels to 1, then divide by the mean over all pixels."""
    w = np.array(w, np.float64)
    mask = np.asarray(mask).astype(bool)
    if w.shape != mask.shape:
        raise ValueError(f"confidence {w.shape} and mask {mask.shape} differ")
    w[mask] = 1.0
    wbar = w.mean()
    assert wbar > 0, "mean confidence must be positive once measured pixels are pinned"
    return w / wbar


def confidence_map(pseudo, measured, grid, mask=None, per_gene=False):
    """Full pipeline: errors, scores, propagation, pinning, unit-mean rescale.

    With ``per_gene`` each gene gets its own map and the arrays gain a
    leading gene axis; otherwise one map is shared by all genes.
    """
    mask = grid.mask if mask is None else np.asarray(mask)
    if not np.array_equal(mask.astype(bool), grid.mask.astype(bool)):
        raise ValueError("observed pixels must lie on the sampling grid")
    if per_gene:
        maps = [confidence_map(p[None], m[None], grid, mask) for p, m in zip(pseudo, measured)]
        return ConfidenceMap(*(np.stack([getattr(c, f) for c in maps])
                               for f in ("errors", "w_obs", "dense", "weights")),
                             mask, maps[0].bilinear_fallback)
    E, w_obs = observed_confidence(pseudo, measured, mask)
    dense, fallback = propagate_confidence(w_obs, grid)
    return ConfidenceMap(E, w_obs, dense, finalize_confidence(dense, mask), mask, fallback)


def write_pgm(path, w):
    """Debug dump of a confidence map: 8-bit PGM, value x 128, clamped."""
    img = np.clip(np.rint(np.asarray(w) * 128.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
