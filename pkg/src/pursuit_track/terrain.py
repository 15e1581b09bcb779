"""Visibility terrain: a smoothed seeded random field on a G x G grid."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

DENSE_THRESHOLD = 0.3
FOREST_FLOOR = 0.05


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TerrainMap:
    """Cell visibility in [0, 1]; 1 is open ground, near 0 dense forest.

    Row index is y, column index is x; cell (ix, iy) covers
    [ix/G, (ix+1)/G) x [iy/G, (iy+1)/G).
    """

    visibility: np.ndarray
    seed: int

    def __post_init__(self):
        vis = np.array(self.visibility, dtype=np.float64)
        vis.setflags(write=False)
        object.__setattr__(self, "visibility", vis)

    @property
    def size(self) -> int:
        return self.visibility.shape[0]

    def cell_of(self, pos) -> tuple[int, int]:
        g = self.size
        ix = min(max(int(pos[0] * g), 0), g - 1)
        iy = min(max(int(pos[1] * g), 0), g - 1)
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return np.array([(ix + 0.5) / self.size, (iy + 0.5) / self.size])

    def visibility_at(self, pos) -> float:
        ix, iy = self.cell_of(pos)
        return float(self.visibility[iy, ix])

    def dense_fraction(self) -> float:
        return float(np.mean(self.visibility < DENSE_THRESHOLD))

    def dense_cell_centers(self) -> np.ndarray:
        iy, ix = np.nonzero(self.visibility < DENSE_THRESHOLD)
        return np.stack([(ix + 0.5) / self.size, (iy + 0.5) / self.size], axis=1)

    def to_csv(self, path: str | Path) -> None:
        np.savetxt(path, self.visibility, delimiter=",", fmt="%.17g")


def generate_terrain(seed: int, size: int = 64, forest_fraction: float = 0.4, smoothing: float = 3.0) -> TerrainMap:
    """Smooth white noise, then rank-map it so that ``forest_fraction`` of
    the cells fall below the dense-forest threshold."""
    if size < 8:
        raise ConfigError(f"grid size must be >= 8, got {size}")
    if not 0.0 <= forest_fraction <= 1.0:
        raise ConfigError(f"forest_fraction must be in [0, 1], got {forest_fraction}")
    rng = np.random.default_rng(seed)
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=smoothing * size / 64, mode="wrap")
    n = size * size
    ranks = np.empty(n)
    ranks[np.argsort(field, axis=None, kind="stable")] = (np.arange(n) + 0.5) / n
    ranks = ranks.reshape(size, size)
    f = forest_fraction
    vis = np.where(
        ranks < f,
        FOREST_FLOOR + (DENSE_THRESHOLD - FOREST_FLOOR) * ranks / max(f, 1e-12),
        DENSE_THRESHOLD + (1.0 - DENSE_THRESHOLD) * (ranks - f) / max(1.0 - f, 1e-12),
    )
    return TerrainMap(np.clip(vis, 0.0, 1.0), seed)
