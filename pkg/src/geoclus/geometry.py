"""Expected volume measure of a stochastic generator over a 2-D latent grid.

At a latent point ``z`` the corners ``z``, ``z + h e1`` and ``z + h e2`` are
pushed through independent draws of the generator; the two difference
vectors span a parallelogram whose area, averaged over draws and divided by
``h^2``, estimates ``E[sqrt(det J^T J)]``.  Jacobians are never formed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geodesic import GeneratorModel


class GeometryError(ValueError):
    pass


def _gram_area(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sqrt(det [a b]^T [a b]) along the last axis."""
    aa = np.sum(a * a, axis=-1)
    bb = np.sum(b * b, axis=-1)
    ab = np.sum(a * b, axis=-1)
    det = aa * bb - ab * ab
    # Gram determinants are >= 0; only rounding can push them below
    assert np.all(det >= -1e-9 * np.maximum(aa * bb, 1e-300)), "negative Gram determinant"
    return np.sqrt(np.maximum(det, 0.0))


def _corner_moments(model: GeneratorModel, z: np.ndarray, h: float):
    """Mean and std of the generator at the three corners of each cell, (3, P, D)."""
    if model.d != 2:
        raise GeometryError(f"volume measure needs a 2-D latent space, got d={model.d}")
    corners = np.stack([z, z + [h, 0.0], z + [0.0, h]])
    flat = corners.reshape(-1, 2)
    mu = model.mean(flat).reshape(3, len(z), model.D)
    sd = np.sqrt(model.variance(flat)).reshape(3, len(z), model.D)
    return mu, sd


def _cell_volume(mu, sd, h, S, rng) -> float:
    """Monte-Carlo volume for one cell given (3, D) corner moments."""
    if not np.any(sd):
        f = mu[None]
    else:
        f = mu[None] + sd[None] * rng.standard_normal((S,) + mu.shape)
    return float(np.mean(_gram_area(f[:, 1] - f[:, 0], f[:, 2] - f[:, 0]))) / (h * h)


def expected_volume_at(model: GeneratorModel, z, h: float, S: int = 100, seed: int = 0) -> float:
    """Sampled expected volume density at latent point ``z``."""
    if h <= 0 or S < 1:
        raise GeometryError("h must be positive and S at least 1")
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != 2:
        raise GeometryError(f"volume measure needs a 2-D latent point, got {z.shape[1]}")
    mu, sd = _corner_moments(model, z, h)
    return _cell_volume(mu[:, 0], sd[:, 0], h, S, np.random.default_rng(seed))


@dataclass
class VolumeField:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # (len(ys), len(xs)), row = y index
    h: float
    samples: int
    seed: int = 0

    @property
    def log_values(self) -> np.ndarray:
        return np.log(np.maximum(self.values, np.finfo(float).tiny))

    @property
    def bounds(self):
        return ((float(self.xs[0]), float(self.xs[-1])), (float(self.ys[0]), float(self.ys[-1])))

    def value_at(self, z) -> np.ndarray:
        """Log-volume of the nearest grid node for each latent row."""
        z = np.atleast_2d(z)
        ix = np.abs(z[:, :1] - self.xs[None]).argmin(axis=1)
        iy = np.abs(z[:, 1:2] - self.ys[None]).argmin(axis=1)
        return self.log_values[iy, ix]

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "vol", "log_vol"])
            logs = self.log_values
            for iy, y in enumerate(self.ys):
                for ix, x in enumerate(self.xs):
                    w.writerow([f"{x:.17g}", f"{y:.17g}", f"{self.values[iy, ix]:.17g}",
                                f"{logs[iy, ix]:.17g}"])

    @classmethod
    def load_csv(cls, path, h: float = float("nan"), samples: int = 0) -> "VolumeField":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        xs, ys = np.unique(arr[:, 0]), np.unique(arr[:, 1])
        if len(xs) * len(ys) != len(arr):
            raise GeometryError(f"{path}: rows do not form a rectangular grid")
        return cls(xs, ys, arr[:, 2].reshape(len(ys), len(xs)), h, samples)

    def save_pgm(self, path) -> None:
        # image row 0 is the top, i.e. the largest y
        render_heatmap(self.log_values[::-1], path)


def volume_grid(model: GeneratorModel, bounds, resolution=100, h: float | None = None,
                S: int = 100, seed: int = 0) -> VolumeField:
    """Expected volume on every node of a regular grid spanning ``bounds``.

    ``bounds`` is ((xmin, xmax), (ymin, ymax)); ``resolution`` an int or an
    (nx, ny) pair.  ``h`` defaults to the grid spacing.  Cell (ix, iy) draws
    from its own generator seeded by (seed, ix, iy).
    """
    (x0, x1), (y0, y1) = bounds
    if not (x1 > x0 and y1 > y0):
        raise GeometryError(f"bounds must be increasing, got {bounds}")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    if nx < 2 or ny < 2:
        raise GeometryError("resolution must be at least 2 per axis")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    if h is None:
        h = float(min(xs[1] - xs[0], ys[1] - ys[0]))
    if h <= 0 or S < 1:
        raise GeometryError("h must be positive and S at least 1")
    values = np.empty((ny, nx))
    for iy, y in enumerate(ys):
        row = np.column_stack([xs, np.full(nx, y)])
        mu, sd = _corner_moments(model, row, h)
        for ix in range(nx):
            rng = np.random.default_rng([seed, ix, iy])
            values[iy, ix] = _cell_volume(mu[:, ix], sd[:, ix], h, S, rng)
    return VolumeField(xs, ys, values, h, S, seed)


def latent_bounds(latents, inflate: float = 0.2):
    """Bounding box of the latents grown by ``inflate`` of its size per side."""
    z = np.asarray(latents, dtype=np.float64)
    lo, hi = z.min(axis=0), z.max(axis=0)
    pad = inflate * np.maximum(hi - lo, 1e-12) / 2.0
    return tuple((float(a), float(b)) for a, b in zip(lo - pad, hi + pad))


def render_heatmap(values, path) -> None:
    """Min-max normalised 8-bit binary PGM (P5); a constant field is mid-gray."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise GeometryError(f"heatmap needs a non-empty rectangular array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("heatmap values must be finite")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        pix = np.full(arr.shape, 128, dtype=np.uint8)
    else:
        pix = np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head, _, rest = raw.partition(b"\n")
    magic, w, h, maxval = head.split()
    if magic != b"P5" or int(maxval) != 255:
        raise GeometryError(f"{path}: not an 8-bit P5 image")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w))
