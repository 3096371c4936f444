"""Variational autoencoder built on :mod:`geoclus.diffcore`.

Five networks: H-enc (shared encoder trunk), M-enc (posterior mean head),
S-enc (posterior log-variance head), H-dec (decoder trunk) and M-dec
(decoder mean head).  Stage-1 training uses a fixed output variance.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import MlpSpec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NETWORKS = ("henc", "menc", "senc", "hdec", "mdec")
# variance floor when S-enc emits a variance through a positive activation
_SENC_VAR_FLOOR = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeArchitecture:
    data_dim: int
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    hidden_activation: str = "softplus"
    senc_activation: str = "identity"
    mdec_activation: str = "identity"
    output_variance: float = 1.0

    def specs(self) -> dict[str, MlpSpec]:
        h = tuple(self.hidden)
        act = self.hidden_activation
        return {
            "henc": MlpSpec((self.data_dim,) + h, (act,) * len(h)),
            "menc": MlpSpec((h[-1], self.latent_dim), ("identity",)),
            "senc": MlpSpec((h[-1], self.latent_dim), (self.senc_activation,)),
            "hdec": MlpSpec((self.latent_dim,) + h[::-1], (act,) * len(h)),
            "mdec": MlpSpec((h[0], self.data_dim), (self.mdec_activation,)),
        }


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    kl_weight: float = 1.0


@dataclass
class LatentCode:
    mean: np.ndarray
    log_variance: np.ndarray


@dataclass
class VaeModel:
    specs: dict[str, MlpSpec]
    params: dict[str, np.ndarray]
    output_variance: float = 1.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.output_variance <= 0:
            raise ValueError("output variance must be positive")
        s = self.specs
        if s["menc"].widths[-1] != s["senc"].widths[-1]:
            raise ValueError("M-enc and S-enc must share the latent width")
        if s["hdec"].widths[0] != s["menc"].widths[-1]:
            raise ValueError("decoder input width must equal the latent width")
        if s["mdec"].widths[-1] != s["henc"].widths[0]:
            raise ValueError("decoder output width must equal the data width")

    @property
    def d(self) -> int:
        return self.specs["menc"].widths[-1]

    @property
    def D(self) -> int:
        return self.specs["henc"].widths[0]

    def copy(self) -> "VaeModel":
        return VaeModel(dict(self.specs), {k: v.copy() for k, v in self.params.items()},
                        self.output_variance, self.seed, dict(self.extra))


def init_vae(arch: VaeArchitecture, seed: int = 0) -> VaeModel:
    rng = np.random.default_rng(seed)
    specs = arch.specs()
    params = {}
    for name in NETWORKS:
        params.update(dc.init_mlp(specs[name], rng, name))
    return VaeModel(specs, params, arch.output_variance, seed)


# -- graph builders ---------------------------------------------------------------

def encoder_graph(model: VaeModel, x: dc.Node) -> tuple[dc.Node, dc.Node]:
    h = dc.mlp_graph(model.specs["henc"], "henc", x)
    mean = dc.mlp_graph(model.specs["menc"], "menc", h)
    s = dc.mlp_graph(model.specs["senc"], "senc", h)
    if model.specs["senc"].activations[-1] == "identity":
        logvar = s
    else:
        logvar = dc.log(s + _SENC_VAR_FLOOR)
    return mean, logvar


def decoder_graph(model: VaeModel, z, params=None) -> dc.Node:
    """Decoder mean network; ``params`` given as arrays makes it a constant map."""
    h_spec, m_spec = model.specs["hdec"], model.specs["mdec"]
    if params is None:
        h = dc.mlp_graph(h_spec, "hdec", z)
        return dc.mlp_graph(m_spec, "mdec", h)
    h = dc.mlp_apply(h_spec, [params[n] for n in h_spec.param_names("hdec")], z)
    return dc.mlp_apply(m_spec, [params[n] for n in m_spec.param_names("mdec")], h)


def kl_graph(mean: dc.Node, logvar: dc.Node) -> dc.Node:
    """Per-row KL(q || N(0, I)), shape (N,)."""
    terms = dc.square(mean) + dc.exp(logvar) - 1.0 - logvar
    return 0.5 * dc.reduce_sum(terms, axis=1)


def elbo_graph(model: VaeModel, kl_weight: float = 1.0):
    """Batch-mean ELBO graph with inputs ``x`` and ``eps``."""
    x, eps = dc.input("x"), dc.input("eps")
    mean, logvar = encoder_graph(model, x)
    z = mean + dc.exp(0.5 * logvar) * eps
    mu = decoder_graph(model, z)
    sq = dc.reduce_sum(dc.square(x - mu), axis=1)
    log_norm = -0.5 * model.D * np.log(2.0 * np.pi * model.output_variance)
    loglik = (-0.5 / model.output_variance) * sq + log_norm
    return dc.reduce_mean(loglik - kl_weight * kl_graph(mean, logvar))


# -- public operations ---------------------------------------------------------------

def _check_width(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise dc.ShapeError(f"{what} expects width {width}, got shape {x.shape}")
    return x2, single


def encode(model: VaeModel, x) -> LatentCode:
    x2, single = _check_width(x, model.D, "encode")
    mean, logvar = encoder_graph(model, dc.input("x"))
    bind = dict(model.params, x=x2)
    m = dc.forward(mean, bind)
    lv = dc.forward(logvar, bind)
    return LatentCode(m[0], lv[0]) if single else LatentCode(m, lv)


def reparam_sample(code: LatentCode, eps) -> np.ndarray:
    return code.mean + np.exp(0.5 * code.log_variance) * np.asarray(eps, dtype=np.float64)


def decode_mean(model: VaeModel, z) -> np.ndarray:
    z2, single = _check_width(z, model.d, "decode_mean")
    out = dc.evaluate(decoder_graph(model, z2, model.params))
    return out[0] if single else out


def kl_to_standard_normal(code: LatentCode) -> float | np.ndarray:
    m, lv = np.asarray(code.mean), np.asarray(code.log_variance)
    kl = 0.5 * np.sum(m * m + np.exp(lv) - 1.0 - lv, axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def elbo(model: VaeModel, x, eps, kl_weight: float = 1.0) -> float:
    x2, _ = _check_width(x, model.D, "elbo")
    eps2, _ = _check_width(eps, model.d, "elbo eps")
    if len(eps2) != len(x2):
        raise dc.ShapeError("need one eps row per data row")
    return float(dc.forward(elbo_graph(model, kl_weight), dict(model.params, x=x2, eps=eps2)))


def elbo_and_grad(model: VaeModel, x, eps, kl_weight: float = 1.0):
    root = elbo_graph(model, kl_weight)
    value = dc.forward(root, dict(model.params, x=np.asarray(x, float), eps=np.asarray(eps, float)))
    return float(value), dc.backward(root, model.params)


def train_stage1(points, config: TrainConfig, arch: VaeArchitecture | None = None,
                 model: VaeModel | None = None) -> tuple[VaeModel, list[float]]:
    """Maximise the ELBO with Adam on minibatches; returns (model, loss trace).

    The loss trace holds the mean negative ELBO per epoch.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty dataset")
    if model is None:
        if arch is None:
            raise ValueError("need an architecture or an initial model")
        model = init_vae(arch, config.seed)
    else:
        model = model.copy()
    if points.shape[1] != model.D:
        raise dc.ShapeError(f"data width {points.shape[1]} != model width {model.D}")
    if config.batch_size > len(points):
        raise ValueError("batch size exceeds dataset size")

    rng = np.random.default_rng([config.seed, 1])
    root = elbo_graph(model, config.kl_weight)
    opt = dc.Adam(lr=config.learning_rate)
    params = model.params
    trace: list[float] = []
    n = len(points)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = points[order[start:start + config.batch_size]]
            eps = rng.standard_normal((len(batch), model.d))
            try:
                value = dc.forward(root, dict(params, x=batch, eps=eps))
                grads = dc.backward(root, params)
            except dc.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch offset {start}: {exc}") from exc
            # maximise ELBO = minimise its negation
            params = opt.step(params, {k: -g for k, g in grads.items()})
            total += -float(value) * len(batch)
        trace.append(total / n)
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.5f", epoch, trace[-1])
    model.params = params
    return model, trace


def reconstruction_mse(model: VaeModel, points) -> float:
    code = encode(model, points)
    return float(np.mean((decode_mean(model, code.mean) - points) ** 2))


# -- serialization -----------------------------------------------------------------

def model_to_dict(model: VaeModel) -> dict:
    return {
        "format-version": FORMAT_VERSION,
        "d": model.d,
        "D": model.D,
        "layers": {name: model.specs[name].to_dict() for name in NETWORKS},
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                   for k, v in sorted(model.params.items())},
        "stage1-output-variance": model.output_variance,
        "rng-seed": model.seed,
        **model.extra,
    }


def model_from_dict(doc: dict) -> VaeModel:
    if doc.get("format-version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format-version {doc.get('format-version')!r}")
    specs = {name: MlpSpec.from_dict(doc["layers"][name]) for name in NETWORKS}
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    known = {"format-version", "d", "D", "layers", "params", "stage1-output-variance", "rng-seed"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return VaeModel(specs, params, float(doc["stage1-output-variance"]), int(doc["rng-seed"]), extra)


def save_model(model: VaeModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> VaeModel:
    return model_from_dict(json.loads(Path(path).read_text()))
