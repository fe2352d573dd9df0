"""Square pixel grids with physical spacing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """``size x size`` pixels covering ``[0, extent]^2`` millimetres.

    Pixel ``(i, j)`` (row ``i``, column ``j``) has its centre at
    ``x = (j + 0.5) h``, ``y = (i + 0.5) h`` with ``h = extent / size``.
    """

    size: int
    extent: float = 50.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"grid size must be positive, got {self.size}")
        if not self.extent > 0:
            raise ValueError(f"grid extent must be positive, got {self.extent}")

    @property
    def spacing(self) -> float:
        return self.extent / self.size

    @property
    def shape(self):
        return (self.size, self.size)

    @property
    def n_pixels(self) -> int:
        return self.size * self.size

    def centers(self):
        """Return ``(X, Y)`` arrays of pixel-centre coordinates in mm."""
        c = (np.arange(self.size) + 0.5) * self.spacing
        return np.meshgrid(c, c, indexing="xy")

    def center_points(self):
        """Pixel centres as an ``(n_pixels, 2)`` array in row-major order."""
        X, Y = self.centers()
        return np.column_stack([X.ravel(), Y.ravel()])


def resample_field(field, src: Grid, dst: Grid):
    """Bilinear resampling of a ``(channels, n, n)`` field between grids.

    Used to move a truth image onto a finer data-generation grid.  Values
    outside the source pixel centres are extended with the nearest value.
    """
    from scipy.interpolate import RegularGridInterpolator

    field = np.asarray(field, dtype=float)
    c_src = (np.arange(src.size) + 0.5) * src.spacing
    X, Y = dst.centers()
    pts = np.column_stack([np.clip(Y.ravel(), c_src[0], c_src[-1]),
                           np.clip(X.ravel(), c_src[0], c_src[-1])])
    out = np.empty((field.shape[0],) + dst.shape)
    for k, chan in enumerate(field):
        interp = RegularGridInterpolator((c_src, c_src), chan, method="linear")
        out[k] = interp(pts).reshape(dst.shape)
    return out
