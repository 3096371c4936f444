"""Latent Gaussian mixture used as the generator's inverse-variance model.

The precision at latent ``z`` is ``(sum_i w_i N(z | c_i, S_i) + floor) * W``
per output dimension, with diagonal ``S_i`` and positive rescaling ``W``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from . import vae as vae_mod

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class EmError(RuntimeError):
    pass


@dataclass
class Mixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray  # (K, d) diagonal covariances
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.weights)

    def log_component_densities(self, z: np.ndarray) -> np.ndarray:
        """log(w_i N(z | c_i, S_i)) for every row of z, shape (N, K)."""
        diff = z[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None], axis=2)
        log_norm = -0.5 * (z.shape[1] * LOG_2PI + np.sum(np.log(self.variances), axis=1))
        return np.log(self.weights)[None] + log_norm[None] - 0.5 * quad

    def log_likelihood(self, z: np.ndarray) -> float:
        return float(np.mean(logsumexp(self.log_component_densities(z), axis=1)))

    def peak_density(self) -> float:
        """Largest weighted component density at its own mean."""
        d = self.means.shape[1]
        peaks = self.weights * np.exp(-0.5 * (d * LOG_2PI + np.sum(np.log(self.variances), axis=1)))
        return float(peaks.max())


def _kmeanspp(z: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [z[rng.integers(len(z))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(z))
        else:
            idx = rng.choice(len(z), p=d2 / total)
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    return np.array(centers)


def _em_once(z, K, rng, max_iter, tol, var_floor, reg):
    n, d = z.shape
    means = _kmeanspp(z, K, rng)
    assign = np.argmin(((z[:, None, :] - means[None]) ** 2).sum(2), axis=1)
    global_var = z.var(axis=0) + reg
    variances = np.empty((K, d))
    weights = np.empty(K)
    for k in range(K):
        members = z[assign == k]
        weights[k] = max(len(members), 1) / n
        variances[k] = members.var(axis=0) if len(members) > 1 else global_var
        variances[k] = np.where(variances[k] > reg, variances[k], global_var)
    weights /= weights.sum()
    mix = Mixture(weights, means, variances)

    lls = []
    for _ in range(max_iter):
        logp = mix.log_component_densities(z)
        lse = logsumexp(logp, axis=1)
        lls.append(float(np.mean(lse)))
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) <= tol * abs(lls[-2]):
            break
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 1e-10 * n):
            return None
        means = (resp.T @ z) / nk[:, None]
        # clamping is the exact M-step under the constraint variance >= reg
        variances = np.maximum((resp.T @ (z * z)) / nk[:, None] - means ** 2, reg)
        if np.any(variances < var_floor):
            return None
        mix = Mixture(nk / n, means, variances)
    mix.log_likelihoods = lls
    return mix


def em_fit(latents, K: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-7,
           n_init: int = 5, max_reseeds: int = 5, reg_ratio: float = 1e-6,
           floor_ratio: float = 1e-10) -> Mixture:
    """Diagonal-covariance GMM by EM with k-means++ seeding.

    Keeps the best of ``n_init`` converged runs.  Variances are held at or
    above ``reg_ratio`` times the largest data variance, so a component that
    captures a single point stays a narrow spike instead of a singularity.
    A run whose component still collapses (empty, or variance under
    ``floor_ratio`` times the data variance) is discarded and re-seeded;
    more than ``max_reseeds`` collapses raise EmError.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("latents must be N x d")
    n_distinct = len(np.unique(z, axis=0))
    if K < 1 or K > n_distinct:
        raise EmError(f"K={K} but only {n_distinct} distinct points")
    scale = max(float(z.var(axis=0).max()), 1e-300)
    var_floor, reg = floor_ratio * scale, reg_ratio * scale
    rng = np.random.default_rng([seed, 7])
    best, collapses = None, 0
    runs = 0
    while runs < n_init:
        mix = _em_once(z, K, rng, max_iter, tol, var_floor, reg)
        if mix is None:
            collapses += 1
            log.debug("EM component collapse (%d)", collapses)
            if collapses > max_reseeds:
                raise EmError(f"EM collapsed {collapses} times with K={K}")
            continue
        runs += 1
        if best is None or mix.log_likelihoods[-1] > best.log_likelihoods[-1]:
            best = mix
    return best


@dataclass
class PrecisionGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    rescale: np.ndarray  # W_g, one positive weight per output dimension
    floor: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        self.rescale = np.asarray(self.rescale, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-12 * len(self.weights) + 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances <= 0) or np.any(self.rescale <= 0) or self.floor <= 0:
            raise ValueError("variances, rescale weights and floor must be positive")

    @classmethod
    def from_mixture(cls, mix: Mixture, D: int, floor_ratio: float = 1e-6,
                     rescale=None) -> "PrecisionGmm":
        rescale = np.ones(D) if rescale is None else rescale
        return cls(mix.weights / mix.weights.sum(), mix.means, mix.variances, rescale,
                   floor_ratio * mix.peak_density())

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def D(self) -> int:
        return len(self.rescale)

    def mixture(self) -> Mixture:
        return Mixture(self.weights, self.means, self.variances)

    def density(self, z) -> np.ndarray:
        """Floored mixture density, shape (N,)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        logp = self.mixture().log_component_densities(z)
        return np.exp(logsumexp(logp, axis=1)) + self.floor

    def fast_density(self, z) -> np.ndarray:
        """Same as :meth:`density` by direct summation; cheaper on large batches."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        log_coef = (np.log(self.weights)
                    - 0.5 * (self.d * LOG_2PI + np.sum(np.log(self.variances), axis=1)))
        cols = [np.ascontiguousarray(z[:, j]) for j in range(z.shape[1])]
        total = np.full(len(z), self.floor)
        quad = np.empty(len(z))
        tmp = np.empty(len(z))
        for c, s, lc in zip(self.means, self.variances, log_coef):
            quad.fill(lc)
            for j, col in enumerate(cols):
                np.subtract(col, c[j], out=tmp)
                np.multiply(tmp, tmp, out=tmp)
                tmp *= 0.5 / s[j]
                quad -= tmp
            total += np.exp(quad, out=quad)
        return total

    def mean_variance(self, z) -> np.ndarray:
        """Output variance averaged over the D dimensions, shape (N,)."""
        return np.mean(1.0 / self.rescale) / self.fast_density(z)

    def precision(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        g = self.density(z)[:, None] * self.rescale[None, :]
        return g[0] if z.ndim == 1 else g

    def variance(self, z) -> np.ndarray:
        return 1.0 / self.precision(z)

    def precision_graph(self, z: dc.Node) -> dc.Node:
        """Differentiable precision for latent rows ``z`` (R x d) -> (R x D)."""
        K, d = self.means.shape
        diff = dc.reshape(z, (-1, 1, d)) - self.means[None]
        quad = dc.reduce_sum(dc.square(diff) * (-0.5 / self.variances[None]), axis=2)
        log_coef = (np.log(self.weights)
                    - 0.5 * (d * LOG_2PI + np.sum(np.log(self.variances), axis=1)))
        dens = dc.reduce_sum(dc.exp(quad + log_coef[None]), axis=1) + self.floor
        return dc.reshape(dens, (-1, 1)) * self.rescale[None]

    def variance_graph(self, z: dc.Node) -> dc.Node:
        return dc.exp(-dc.log(self.precision_graph(z)))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariance-diagonals": self.variances.tolist(),
            "W_g": self.rescale.tolist(),
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, doc) -> "PrecisionGmm":
        return cls(np.array(doc["weights"]), np.array(doc["means"]),
                   np.array(doc["covariance-diagonals"]), np.array(doc["W_g"]), float(doc["floor"]))


def fit_rescale_from_residuals(sq_residuals: np.ndarray, density: np.ndarray,
                               steps: int = 2000, lr: float = 1e-2) -> np.ndarray:
    """Fit W (log-parametrised) to maximise the Gaussian log-likelihood.

    ``sq_residuals`` is (N, D) squared reconstruction errors, ``density`` the
    (N,) floored mixture density at the matching latents.  Per datum and
    dimension the precision is ``density * W``.
    """
    sq = np.asarray(sq_residuals, dtype=np.float64)
    rho = np.asarray(density, dtype=np.float64)
    u = dc.parameter("u")
    weighted = dc.constant(rho[:, None] * sq)
    # mean over data of sum_D [0.5 log(rho W) - 0.5 rho W r^2]; log rho is constant
    objective = dc.reduce_sum(0.5 * u - 0.5 * dc.reduce_mean(dc.exp(u) * weighted, axis=0))
    # moment-matched start, refined by Adam
    u0 = -np.log(np.mean(rho) * np.mean(sq, axis=0) + 1e-300)
    params = {"u": u0.reshape(1, -1)}
    opt = dc.Adam(lr=lr)
    for _ in range(steps):
        dc.forward(objective, params)
        grads = dc.backward(objective, params)
        params = opt.step(params, {"u": -grads["u"]})
    return np.exp(params["u"][0])


def fit_Wg(model: vae_mod.VaeModel, mixture: Mixture | PrecisionGmm, points,
           seed: int = 0, steps: int = 2000, lr: float = 1e-2, n_samples: int = 4,
           floor_ratio: float = 1e-6) -> PrecisionGmm:
    """Train the rescaling weights with the VAE and mixture held fixed.

    The expectation over q(z|x) uses ``n_samples`` reparametrised draws per
    datum, drawn once so the objective is deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    prec = (mixture if isinstance(mixture, PrecisionGmm)
            else PrecisionGmm.from_mixture(mixture, model.D, floor_ratio))
    rng = np.random.default_rng([seed, 11])
    code = vae_mod.encode(model, points)
    zs, xs = [], []
    for _ in range(n_samples):
        zs.append(vae_mod.reparam_sample(code, rng.standard_normal(code.mean.shape)))
        xs.append(points)
    z = np.vstack(zs)
    x = np.vstack(xs)
    sq = (x - vae_mod.decode_mean(model, z)) ** 2
    W = fit_rescale_from_residuals(sq, prec.density(z), steps=steps, lr=lr)
    if not np.all(np.isfinite(W)):
        raise EmError("non-finite W_g")
    return PrecisionGmm(prec.weights, prec.means, prec.variances, W, prec.floor)
