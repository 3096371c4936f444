"""Geodesics in the latent space of a stochastic generator.

The generator is ``f(z) = mu(z) + sigma(z) * eps``.  For two latent points
the expected squared output distance has the closed form

    E||f(zi) - f(zj)||^2 = sum_D (mu(zi) - mu(zj))^2 + sigma^2(zi) + sigma^2(zj)

and the expected energy of a curve is that quantity summed over the
segments of a uniform discretisation.  Curves are quadratics pinned at both
endpoints, leaving ``d`` free coefficients; they are minimised with Adam,
optionally starting from a sampling-based initialiser that steers the curve
through low-variance latent regions.

Many pairs are optimised together: energies of different pairs are
independent, so one graph over a batch of pairs yields every pair's
gradient in one backward pass.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .latentgmm import PrecisionGmm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorModel:
    """Mean map and per-dimension variance map, both as graph builders.

    ``mean_fn``/``variance_fn`` take a node of latent rows (R x d) and return
    a node of shape (R x D).  ``variance_fn=None`` means a deterministic
    generator.  ``precision`` (optional) gives the initialiser a fast
    variance evaluator.
    """

    mean_fn: Callable[[dc.Node], dc.Node]
    variance_fn: Callable[[dc.Node], dc.Node] | None
    d: int
    D: int
    precision: PrecisionGmm | None = None

    @classmethod
    def from_vae(cls, model, precision: PrecisionGmm) -> "GeneratorModel":
        from .vae import decoder_graph

        if precision.d != model.d or precision.D != model.D:
            raise ValueError("precision model and VAE disagree on d or D")
        params = {k: v for k, v in model.params.items() if k.startswith(("hdec", "mdec"))}
        return cls(lambda z: decoder_graph(model, z, params), precision.variance_graph,
                   model.d, model.D, precision)

    @classmethod
    def linear(cls, A, b=None, variance: float = 0.0) -> "GeneratorModel":
        """``mu(z) = A z + b`` with constant isotropic variance."""
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        D, d = A.shape
        b = np.zeros(D) if b is None else np.asarray(b, dtype=np.float64)
        At = A.T.copy()

        def mean_fn(z):
            return z @ At + b[None]

        variance_fn = None
        if variance > 0:
            row = np.full((1, D), float(variance))

            def variance_fn(z):
                return 0.0 * dc.reduce_sum(z, axis=1, keepdims=True) + row

        return cls(mean_fn, variance_fn, d, D)

    @classmethod
    def identity(cls, d: int, variance: float = 0.0) -> "GeneratorModel":
        return cls.linear(np.eye(d), variance=variance)

    def mean(self, z) -> np.ndarray:
        z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
        out = dc.evaluate(self.mean_fn(dc.constant(z2)))
        return out[0] if np.ndim(z) == 1 else out

    def variance(self, z) -> np.ndarray:
        z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.precision is not None:
            out = self.precision.variance(z2)
        elif self.variance_fn is None:
            out = np.zeros((len(z2), self.D))
        else:
            out = dc.evaluate(self.variance_fn(dc.constant(z2)))
        return out[0] if np.ndim(z) == 1 else out

    def sample(self, z, eps) -> np.ndarray:
        """Reparametrised draw ``mu(z) + sigma(z) * eps``."""
        return self.mean(z) + np.sqrt(self.variance(z)) * eps


@dataclass
class QuadraticCurve:
    """``c(t) = (1 - t) z0 + t z1 + (t^2 - t) a`` on [0, 1]."""

    z0: np.ndarray
    z1: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=np.float64)
        self.z1 = np.asarray(self.z1, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if not (self.z0.shape == self.z1.shape == self.a.shape) or self.z0.ndim != 1:
            raise ValueError("z0, z1 and a must be vectors of equal length")

    @classmethod
    def straight(cls, z0, z1) -> "QuadraticCurve":
        z0 = np.asarray(z0, dtype=np.float64)
        return cls(z0, z1, np.zeros_like(z0))

    def __call__(self, t):
        return curve_eval(self, t)


def curve_eval(curve: QuadraticCurve, t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    tt = t_arr[..., None]
    return (1.0 - tt) * curve.z0 + tt * curve.z1 + (tt * tt - tt) * curve.a


@dataclass
class GeodesicConfig:
    n_segments: int = 16
    max_iterations: int = 1000
    learning_rate: float = 1e-2
    convergence_tol: float = 1e-6
    patience: int = 5
    init: str = "algorithm1"
    init_max_step: int = 10
    init_m: int = 64
    init_shrink: float = 0.7
    seed: int = 0
    batch_pairs: int = 512

    def __post_init__(self):
        if self.n_segments < 2:
            raise ValueError("n_segments must be at least 2")
        if self.init not in ("straight", "algorithm1"):
            raise ValueError(f"unknown init {self.init!r}")


# -- energies ------------------------------------------------------------------------

def _knots(n: int) -> np.ndarray:
    return np.arange(n + 1, dtype=np.float64) / n


def _segment_graph(model: GeneratorModel, n: int):
    """Graph of per-segment expected squared distances, shape (P, n).

    Inputs ``z0``/``z1`` (P x d), parameter ``a`` (P x d).
    """
    d, D = model.d, model.D
    t = _knots(n)
    z0, z1, a = dc.input("z0"), dc.input("z1"), dc.parameter("a")
    c = (dc.reshape(z0, (-1, 1, d)) * (1.0 - t)[None, :, None]
         + dc.reshape(z1, (-1, 1, d)) * t[None, :, None]
         + dc.reshape(a, (-1, 1, d)) * (t * t - t)[None, :, None])
    flat = dc.reshape(c, (-1, d))
    mu = dc.reshape(model.mean_fn(flat), (-1, n + 1, D))
    seg = dc.reduce_sum(dc.square(mu[:, 1:, :] - mu[:, :-1, :]), axis=2)
    if model.variance_fn is not None:
        var = dc.reduce_sum(dc.reshape(model.variance_fn(flat), (-1, n + 1, D)), axis=2)
        seg = seg + var[:, 1:] + var[:, :-1]
    return seg


def _energy_graph(model: GeneratorModel, n: int):
    seg = _segment_graph(model, n)
    energies = dc.reduce_sum(seg, axis=1)
    return dc.reduce_sum(energies), energies, seg


def segment_expected_sq(model: GeneratorModel, zi, zj) -> float | np.ndarray:
    """Closed-form E||f(zi) - f(zj)||^2 for independent generator noise."""
    zi2 = np.atleast_2d(np.asarray(zi, dtype=np.float64))
    zj2 = np.atleast_2d(np.asarray(zj, dtype=np.float64))
    both = np.vstack([zi2, zj2])
    mu = model.mean(both)
    var = model.variance(both)
    n = len(zi2)
    out = np.sum((mu[:n] - mu[n:]) ** 2 + var[:n] + var[n:], axis=1)
    return float(out[0]) if np.ndim(zi) == 1 else out


def _curve_arrays(curves):
    z0 = np.array([c.z0 for c in curves])
    z1 = np.array([c.z1 for c in curves])
    a = np.array([c.a for c in curves])
    return z0, z1, a


def segment_values(model: GeneratorModel, z0, z1, a, n: int) -> np.ndarray:
    """Per-segment expected squared distances for a batch of curves (P x n)."""
    seg = _segment_graph(model, n)
    return dc.forward(seg, {"z0": np.atleast_2d(z0), "z1": np.atleast_2d(z1),
                            "a": np.atleast_2d(a)})


def expected_energy(model: GeneratorModel, curve: QuadraticCurve, n_segments: int) -> float:
    if n_segments < 2:
        raise ValueError("n_segments must be at least 2")
    return float(segment_values(model, curve.z0, curve.z1, curve.a, n_segments).sum())


def energy_and_grad(model: GeneratorModel, curve: QuadraticCurve, n_segments: int):
    root, _, _ = _energy_graph(model, n_segments)
    value = dc.forward(root, {"z0": curve.z0[None], "z1": curve.z1[None], "a": curve.a[None]})
    return float(value), dc.backward(root)["a"][0]


def curve_lengths(model: GeneratorModel, z0, z1, a, n: int) -> np.ndarray:
    """Discretised expected length: sum over segments of sqrt(E||df||^2)."""
    return np.sqrt(segment_values(model, z0, z1, a, n)).sum(axis=1)


# -- initialisation ----------------------------------------------------------------------

def _variance_cost(model: GeneratorModel, z0, z1, thetas, n: int) -> np.ndarray:
    """Integrated mean output variance along candidate curves.

    ``thetas`` is (P, M, d); returns (P, M).
    """
    t = _knots(n)
    P, M, d = thetas.shape
    c = ((1.0 - t)[None, None, :, None] * z0[:, None, None, :]
         + t[None, None, :, None] * z1[:, None, None, :]
         + (t * t - t)[None, None, :, None] * thetas[:, :, None, :])
    flat = c.reshape(-1, d)
    if model.precision is not None:
        var = model.precision.mean_variance(flat)
    else:
        var = model.variance(flat).mean(axis=1)
    return var.reshape(P, M, n + 1).sum(axis=2) / n


def _algorithm1_batch(model: GeneratorModel, z0, z1, rngs, M: int, max_step: int,
                      n: int, shrink: float = 0.7) -> np.ndarray:
    """Elite-of-M evolution strategy over curve coefficients.

    Starts at the straight line with sampling variance ||z0 - z1||, keeps
    the incumbent centre among the candidates, recentres on the cheapest
    candidate and shrinks the scale each step, then draws the returned
    coefficients from the final sampling distribution.
    """
    P, d = z0.shape
    mu = np.zeros((P, d))
    sd = np.sqrt(np.linalg.norm(z0 - z1, axis=1))
    for _ in range(max_step):
        noise = np.stack([rng.standard_normal((M, d)) for rng in rngs])
        cand = np.concatenate([mu[:, None, :], mu[:, None, :] + sd[:, None, None] * noise], axis=1)
        cost = _variance_cost(model, z0, z1, cand, n)
        best = np.argmin(cost, axis=1)
        mu = cand[np.arange(P), best]
        sd = sd * shrink
    final = np.stack([rng.standard_normal(d) for rng in rngs])
    return mu + sd[:, None] * final


def init_curve_algorithm1(model: GeneratorModel, z0, z1, init_m: int = 64,
                          init_max_step: int = 10, seed: int = 0, n_segments: int = 16,
                          shrink: float = 0.7) -> QuadraticCurve:
    rng = np.random.default_rng(seed)
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    a = _algorithm1_batch(model, z0[None], z1[None], [rng], init_m, init_max_step,
                          n_segments, shrink)
    return QuadraticCurve(z0, z1, a[0])


def initial_cost(model: GeneratorModel, curve: QuadraticCurve, n_segments: int = 16) -> float:
    """The initialiser's objective for one curve."""
    return float(_variance_cost(model, curve.z0[None], curve.z1[None], curve.a[None, None],
                                n_segments)[0, 0])


# -- optimisation -------------------------------------------------------------------------

@dataclass
class BatchResult:
    a: np.ndarray
    energy: np.ndarray
    initial_energy: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    failed: np.ndarray


def optimize_curves(model: GeneratorModel, z0, z1, a0, config: GeodesicConfig) -> BatchResult:
    """Adam on the curve coefficients of P independent pairs at once.

    A pair stops once its relative energy change stays below
    ``convergence_tol`` for ``patience`` consecutive iterations, or at
    ``max_iterations``.  The best iterate seen is returned, so the final
    energy never exceeds the initial one.  Pairs whose energy or gradient
    turns non-finite fall back to the straight line and are flagged.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    a = np.array(np.atleast_2d(a0), dtype=np.float64)
    P = len(z0)
    root, energies, _ = _energy_graph(model, config.n_segments)

    m = np.zeros_like(a)
    v = np.zeros_like(a)
    best_a = a.copy()
    best_e = np.full(P, np.inf)
    init_e = np.full(P, np.nan)
    prev_e = np.full(P, np.nan)
    calm = np.zeros(P, dtype=np.int64)
    converged = np.zeros(P, dtype=bool)
    failed = np.zeros(P, dtype=bool)
    iterations = np.zeros(P, dtype=np.int64)
    active = np.arange(P)

    for it in range(config.max_iterations + 1):
        if active.size == 0:
            break
        dc.forward(root, {"z0": z0[active], "z1": z1[active], "a": a[active]}, check_finite=False)
        e = energies.value.copy()
        g = dc.backward(root, check_finite=False)["a"]
        ok = np.isfinite(e) & np.all(np.isfinite(g), axis=1)
        if not ok.all():
            bad = active[~ok]
            log.warning("non-finite energy for %d pair(s); falling back to straight lines", len(bad))
            failed[bad] = True
        if it == 0:
            init_e[active] = e
        better = ok & (e < best_e[active])
        best_e[active[better]] = e[better]
        best_a[active[better]] = a[active[better]]

        if it > 0:
            prev = prev_e[active]
            rel = np.abs(e - prev) / np.maximum(np.abs(prev), 1e-300)
            calm[active] = np.where(rel < config.convergence_tol, calm[active] + 1, 0)
        prev_e[active] = e
        done = calm[active] >= config.patience
        converged[active[done]] = True
        if it == config.max_iterations:
            break
        keep = ok & ~done
        rows = active[keep]
        a[rows], m[rows], v[rows] = dc.adam_update(
            a[rows], g[keep], m[rows], v[rows], it + 1, config.learning_rate)
        iterations[rows] += 1
        active = rows

    if failed.any():
        best_a[failed] = 0.0
        converged[failed] = False
        straight = segment_values(model, z0[failed], z1[failed], best_a[failed],
                                  config.n_segments).sum(axis=1)
        best_e[failed] = straight
        init_e[failed] = np.where(np.isfinite(init_e[failed]), init_e[failed], straight)
    return BatchResult(best_a, best_e, init_e, converged, iterations, failed)


@dataclass
class GeodesicResult:
    curve: QuadraticCurve
    energy: float
    initial_energy: float
    converged: bool
    iterations: int


def optimize_geodesic(model: GeneratorModel, curve_init: QuadraticCurve,
                      config: GeodesicConfig) -> GeodesicResult:
    r = optimize_curves(model, curve_init.z0[None], curve_init.z1[None], curve_init.a[None], config)
    curve = QuadraticCurve(curve_init.z0, curve_init.z1, r.a[0])
    return GeodesicResult(curve, float(r.energy[0]), float(r.initial_energy[0]),
                          bool(r.converged[0]), int(r.iterations[0]))


def _initial_coefficients(model, z0, z1, pairs, config: GeodesicConfig) -> np.ndarray:
    if config.init == "straight" or model.variance_fn is None:
        return np.zeros_like(z0)
    rngs = [np.random.default_rng([config.seed, int(i), int(j)]) for i, j in pairs]
    return _algorithm1_batch(model, z0, z1, rngs, config.init_m, config.init_max_step,
                             config.n_segments, config.init_shrink)


def geodesic_distance(model: GeneratorModel, z0, z1, config: GeodesicConfig) -> float:
    """Length of the optimised curve; zero for identical endpoints."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if np.array_equal(z0, z1):
        return 0.0
    a0 = _initial_coefficients(model, z0[None], z1[None], [(0, 1)], config)
    r = optimize_curves(model, z0[None], z1[None], a0, config)
    return float(curve_lengths(model, z0[None], z1[None], r.a, config.n_segments)[0])


# -- distance matrices -----------------------------------------------------------------------

KINDS = ("geodesic", "euclidean-latent")


@dataclass
class DistanceMatrix:
    values: np.ndarray
    kind: str
    converged: np.ndarray | None = None
    iterations: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"distance matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("distances must be finite and non-negative")
        if not np.array_equal(v, v.T) or np.any(np.diag(v) != 0):
            raise ValueError("distance matrix must be symmetric with zero diagonal")
        if self.converged is None:
            self.converged = np.ones(v.shape, dtype=bool)

    @property
    def N(self) -> int:
        return len(self.values)

    def converged_fraction(self) -> float:
        iu = np.triu_indices(self.N, 1)
        return float(self.converged[iu].mean()) if len(iu[0]) else 1.0

    def save(self, path) -> None:
        path = Path(path)
        np.savetxt(path, self.values, fmt="%.17g", delimiter=",")
        iu = np.triu_indices(self.N, 1)
        side = {
            "kind": self.kind,
            "N": self.N,
            "converged": self.converged[iu].astype(int).tolist(),
            "iterations": None if self.iterations is None else self.iterations[iu].tolist(),
            **self.meta,
        }
        sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        path = Path(path)
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        side = json.loads(sidecar_path(path).read_text())
        n = len(values)
        iu = np.triu_indices(n, 1)
        conv = np.ones((n, n), dtype=bool)
        conv[iu] = np.array(side.pop("converged"), dtype=bool)
        conv.T[iu] = conv[iu]
        iters = side.pop("iterations")
        it_mat = None
        if iters is not None:
            it_mat = np.zeros((n, n), dtype=np.int64)
            it_mat[iu] = iters
            it_mat.T[iu] = it_mat[iu]
        kind = side.pop("kind")
        side.pop("N", None)
        return cls(values, kind, conv, it_mat, side)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _solve_chunk(model, latents, pairs, config):
    z0 = latents[pairs[:, 0]]
    z1 = latents[pairs[:, 1]]
    a0 = _initial_coefficients(model, z0, z1, pairs, config)
    r = optimize_curves(model, z0, z1, a0, config)
    lengths = curve_lengths(model, z0, z1, r.a, config.n_segments)
    return lengths, r.converged, r.iterations


def pairwise_distances(model: GeneratorModel, latents, config: GeodesicConfig,
                       jobs: int = 1) -> DistanceMatrix:
    """Geodesic distance for every unordered pair of latent points.

    Pairs are split into fixed chunks of ``config.batch_pairs`` so the
    result does not depend on ``jobs``; each pair's initialiser is seeded
    from (seed, i, j).
    """
    z = np.asarray(latents, dtype=np.float64)
    N = len(z)
    if N < 2:
        raise ValueError("need at least two points")
    iu = np.triu_indices(N, 1)
    pairs = np.column_stack(iu)
    same = np.all(z[pairs[:, 0]] == z[pairs[:, 1]], axis=1)
    todo = pairs[~same]
    chunks = [todo[s:s + config.batch_pairs] for s in range(0, len(todo), config.batch_pairs)]

    if jobs > 1 and len(chunks) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(_solve_chunk)(model, z, c, config) for c in chunks)
    else:
        results = [_solve_chunk(model, z, c, config) for c in chunks]

    values = np.zeros((N, N))
    conv = np.ones((N, N), dtype=bool)
    iters = np.zeros((N, N), dtype=np.int64)
    for chunk, (lengths, c, it) in zip(chunks, results):
        i, j = chunk[:, 0], chunk[:, 1]
        values[i, j] = values[j, i] = lengths
        conv[i, j] = conv[j, i] = c
        iters[i, j] = iters[j, i] = it
    meta = {"seed": config.seed, "config": asdict(config)}
    return DistanceMatrix(values, "geodesic", conv, iters, meta)
