"""Regular grid-sparse sampling of adjacent sections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplingGrid:
    height: int
    width: int
    spacing: int
    offset: tuple

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def lattice_shape(self):
        """Cells per axis, ``ceil(H / s)`` by ``ceil(W / s)``."""
        s = self.spacing
        return (-(-self.height // s), -(-self.width // s))

    def lattice_rows(self):
        """Pixel row of each lattice node; the last cell is clamped into frame."""
        return _axis_nodes(self.height, self.spacing, self.offset[0])

    def lattice_cols(self):
        return _axis_nodes(self.width, self.spacing, self.offset[1])

    @property
    def coords(self):
        r, c = np.meshgrid(self.lattice_rows(), self.lattice_cols(), indexing="ij")
        return np.stack([r.ravel(), c.ravel()], axis=1)

    @property
    def mask(self):
        m = np.zeros(self.shape, np.uint8)
        m[np.ix_(self.lattice_rows(), self.lattice_cols())] = 1
        return m

    @property
    def count(self):
        nr, nc = self.lattice_shape
        return nr * nc

    @property
    def fraction(self):
        return self.count / (self.height * self.width)


def _axis_nodes(n, s, off):
    # a partial trailing block still gets one site, at the offset if it fits
    nodes = np.arange(off, off + s * (-(-n // s)), s)
    return np.minimum(nodes, n - 1).astype(int)


def make_grid_mask(H, W, spacing=2, offset=(0, 0)):
    """One sampled pixel per ``spacing x spacing`` block at a fixed phase."""
    spacing = int(spacing)
    if spacing < 1:
        raise ValueError(f"spacing must be >= 1, got {spacing}")
    off = tuple(int(o) for o in offset)
    if len(off) != 2 or not all(0 <= o < spacing for o in off):
        raise ValueError(f"offset {offset} out of range for spacing {spacing}")
    if H < spacing or W < spacing:
        raise ValueError(f"image {H}x{W} smaller than grid spacing {spacing}")
    return SamplingGrid(int(H), int(W), spacing, off)


def apply_mask(expression, grid):
    """Zero expression off-grid. Returns ``(sparse, mask)``; the input is untouched."""
    expression = np.asarray(expression)
    if expression.ndim != 3 or expression.shape[1:] != grid.shape:
        raise ValueError(f"expression {expression.shape} does not match grid {grid.shape}")
    mask = grid.mask
    return np.where(mask.astype(bool), expression, 0).astype(expression.dtype), mask
