"""BEV occupancy probability grids.

Row index i runs along +y, column index j along +x; `origin` is the
lower-left corner of cell (0, 0) in the owning agent's frame. Cells are
square. Binarization is strict: occupied iff probability > tau.
"""

import numpy as np

from . import geometry


class OccupancyGrid:
    def __init__(self, probs, cell_size, origin, tau=0.1):
        p = np.ascontiguousarray(probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 2:
            raise ValueError("grid must be at least 2x2")
        if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must lie in [0, 1]")
        if cell_size <= 0.0:
            raise ValueError("cell size must be positive")
        self.probs = p
        self.cell_size = float(cell_size)
        self.origin = np.ascontiguousarray(origin, dtype=np.float64).reshape(2)
        self.tau = float(tau)

    @property
    def shape(self):
        return self.probs.shape

    def binarize(self):
        """Occupancy mask: cell occupied iff probability > tau."""
        return self.probs > self.tau

    def cell_centers(self):
        """(H*W, 2) centers in the grid's own frame, row-major order."""
        h, w = self.probs.shape
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        x = self.origin[0] + (jj.ravel() + 0.5) * self.cell_size
        y = self.origin[1] + (ii.ravel() + 0.5) * self.cell_size
        return np.stack([x, y], axis=1)

    def with_probs(self, probs):
        return OccupancyGrid(probs, self.cell_size, self.origin, self.tau)


def resample_map(src, dst, transform_src_to_dst):
    """Nearest-cell lookup table from dst cells into a src grid.

    Returns (idx, mask): for each dst cell (row-major flat order), the
    flat index of the nearest src cell, and whether the dst cell center
    falls inside the src extent at all. Cells outside contribute
    probability 0. Pure geometry: reusable by the taped fusion path.
    """
    centers = dst.cell_centers()
    back = geometry.apply(geometry.invert(transform_src_to_dst), centers)
    hs, ws = src.probs.shape
    j = np.floor((back[:, 0] - src.origin[0]) / src.cell_size).astype(np.intp)
    i = np.floor((back[:, 1] - src.origin[1]) / src.cell_size).astype(np.intp)
    mask = (i >= 0) & (i < hs) & (j >= 0) & (j < ws)
    idx = np.where(mask, i * ws + j, 0)
    return idx, mask


def resample_nearest(src, dst, transform_src_to_dst):
    """src probabilities sampled onto dst's geometry (H_dst x W_dst)."""
    idx, mask = resample_map(src, dst, transform_src_to_dst)
    flat = src.probs.ravel()[idx]
    return np.where(mask, flat, 0.0).reshape(dst.probs.shape)
