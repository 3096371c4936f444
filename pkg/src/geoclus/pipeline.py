"""Three-stage pipeline: train the VAE, fit the variance model, then compute
geodesic distances and cluster.  Every stage reads its inputs from, and
writes its outputs to, a run directory so stages can be resumed.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import clustering, data, geometry, latentgmm
from . import vae as vae_mod
from .geodesic import DistanceMatrix, GeneratorModel, GeodesicConfig, pairwise_distances

log = logging.getLogger(__name__)

STAGES = ("data", "train", "variance", "distances", "cluster", "volume", "report")
METHODS = (
    # name, data samples, distance, labels file
    ("Geodesic", "reconstructed data", "geodesic", "labels_geodesic.csv"),
    ("Euclidean", "latent codes", "Euclidean", "labels_euclidean.csv"),
    ("SC", "original data", "RBF affinity", "labels_spectral.csv"),
)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (a usage error)."""


class PrerequisiteError(RuntimeError):
    """A stage's input artefact is missing."""


# -- configuration ------------------------------------------------------------------

@dataclass
class DataConfig:
    name: str = "two-moons"  # two-moons | aniso | idx
    n_train: int = 100  # per class for two-moons and idx, total for aniso
    n_eval: int = 50  # same convention as n_train
    noise_sd: float = 0.08
    normalize: bool = True
    images: str | None = None
    labels: str | None = None
    classes: list[int] | None = None


@dataclass
class ArchConfig:
    latent_dim: int = 2
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    hidden_activation: str = "softplus"
    senc_activation: str = "softplus"
    mdec_activation: str = "identity"
    output_variance: float = 0.01


@dataclass
class TrainSection:
    epochs: int = 500
    batch_size: int = 50
    learning_rate: float = 1e-3
    kl_weight: float = 1.0


@dataclass
class GmmConfig:
    K: int = 10
    wg_steps: int = 2000
    wg_lr: float = 1e-2
    wg_samples: int = 4
    floor_ratio: float = 1e-6


@dataclass
class GeodesicSection:
    n_segments: int = 16
    max_iterations: int = 1000
    learning_rate: float = 1e-2
    convergence_tol: float = 1e-6
    patience: int = 5
    init: str = "algorithm1"
    init_max_step: int = 10
    init_m: int = 64
    init_shrink: float = 0.7
    batch_pairs: int = 512


@dataclass
class ClusterConfig:
    k: int | None = None  # defaults to the number of classes
    restarts: int = 10


@dataclass
class VolumeConfig:
    enabled: bool = True
    resolution: int = 100
    samples: int = 100
    inflate: float = 0.2


SECTIONS = {
    "data": DataConfig,
    "architecture": ArchConfig,
    "train": TrainSection,
    "gmm": GmmConfig,
    "geodesic": GeodesicSection,
    "clustering": ClusterConfig,
    "volume": VolumeConfig,
}


@dataclass
class PipelineConfig:
    preset: str = "two-moons"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    architecture: ArchConfig = field(default_factory=ArchConfig)
    train: TrainSection = field(default_factory=TrainSection)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    geodesic: GeodesicSection = field(default_factory=GeodesicSection)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    volume: VolumeConfig = field(default_factory=VolumeConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Overlay ``doc`` on ``base`` (defaults if None); unknown keys are errors."""
        merged = (base or cls()).to_dict()
        for key, value in doc.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                known = {f.name for f in dataclasses.fields(SECTIONS[key])}
                bad = set(value) - known
                if bad:
                    raise ConfigError(f"unknown key(s) in {key!r}: {', '.join(sorted(bad))}")
                merged[key].update(value)
            elif key in ("preset", "seed"):
                merged[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        out = cls(preset=str(merged["preset"]), seed=int(merged["seed"]),
                  **{k: SECTIONS[k](**merged[k]) for k in SECTIONS})
        out.validate()
        return out

    def validate(self) -> None:
        if self.data.name not in ("two-moons", "aniso", "idx"):
            raise ConfigError(f"unknown dataset {self.data.name!r}")
        if self.data.n_train < 1 or self.data.n_eval < 1:
            raise ConfigError("n_train and n_eval must be positive")
        if self.geodesic.n_segments < 2:
            raise ConfigError("geodesic.n_segments must be at least 2")
        if self.geodesic.init not in ("straight", "algorithm1"):
            raise ConfigError(f"unknown geodesic init {self.geodesic.init!r}")
        if self.gmm.K < 1:
            raise ConfigError("gmm.K must be positive")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_config(self) -> vae_mod.TrainConfig:
        return vae_mod.TrainConfig(seed=self.seed, **asdict(self.train))

    def geodesic_config(self) -> GeodesicConfig:
        return GeodesicConfig(seed=self.seed, **asdict(self.geodesic))

    def architecture_for(self, data_dim: int) -> vae_mod.VaeArchitecture:
        a = self.architecture
        return vae_mod.VaeArchitecture(data_dim, a.latent_dim, tuple(a.hidden), a.hidden_activation,
                                       a.senc_activation, a.mdec_activation, a.output_variance)


def _image_preset(name, classes, n_eval, hidden, mdec):
    return {
        "preset": name,
        "data": {"name": "idx", "classes": classes, "n_train": 1000, "n_eval": n_eval,
                 "normalize": False},
        "architecture": {"hidden": hidden, "hidden_activation": "relu",
                         "senc_activation": "sigmoid", "mdec_activation": mdec,
                         "output_variance": 0.01},
        "train": {"epochs": 50, "batch_size": 100},
        "gmm": {"K": 50},
        "geodesic": {"n_segments": 32},
        "volume": {"resolution": 40, "samples": 20},
    }


PRESETS = {
    "two-moons": {"preset": "two-moons"},
    "aniso": {"preset": "aniso", "data": {"name": "aniso", "n_train": 300, "n_eval": 100}},
    "mnist-01": _image_preset("mnist-01", [0, 1], 50, [500], "identity"),
    "mnist-012": _image_preset("mnist-012", [0, 1, 2], 30, [500], "identity"),
    # Fashion-MNIST: T-shirt 0, Sandal 5, Bag 8
    "fashion-2": _image_preset("fashion-2", [0, 5], 50, [500, 200, 100], "sigmoid"),
    "fashion-3": _image_preset("fashion-3", [0, 5, 8], 30, [500, 200, 100], "sigmoid"),
    # EMNIST byclass: 'D' is 13, 'd' is 39
    "emnist-Dd": _image_preset("emnist-Dd", [13, 39], 50, [500, 200, 100], "sigmoid"),
}


def preset_config(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PipelineConfig.from_dict(PRESETS[name])


def parse_override(text: str) -> dict:
    """``section.key=value`` to a nested dict; the value is parsed as JSON if possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) == 2:
        return {parts[0]: {parts[1]: value}}
    raise ConfigError(f"override key {key!r} is nested too deeply")


# -- run-directory helpers ------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _provenance(cfg: PipelineConfig, stage: str) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "preset": cfg.preset,
            "stage": stage}


def _write_sidecar(path: Path, cfg: PipelineConfig, stage: str, **extra) -> None:
    doc = dict(_provenance(cfg, stage), **extra)
    _sidecar(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require(run_dir: Path, name: str, stage: str) -> Path:
    path = run_dir / name
    if not path.exists():
        raise PrerequisiteError(f"{path} is missing; run the '{stage}' stage first")
    return path


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path):
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_latents(path: Path, z: np.ndarray, truth: np.ndarray) -> None:
    header = ["index"] + [f"z{j}" for j in range(z.shape[1])] + ["truth"]
    _write_rows(path, header, ([i] + [_fmt(v) for v in row] + [int(t)]
                               for i, (row, t) in enumerate(zip(z, truth))))


def read_latents(path) -> tuple[np.ndarray, np.ndarray]:
    header, rows = _read_rows(Path(path))
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 1:-1], arr[:, -1].astype(np.int64)


def _load_model(run_dir: Path, need_precision: bool):
    model = vae_mod.load_model(_require(run_dir, "model.json", "train"))
    if not need_precision:
        return model, None
    if "precision" not in model.extra:
        raise PrerequisiteError(f"{run_dir / 'model.json'} has no variance model; "
                                "run the 'fit-variance' stage first")
    return model, latentgmm.PrecisionGmm.from_dict(model.extra["precision"])


# -- stages ------------------------------------------------------------------------------

def _split_idx(cfg: PipelineConfig):
    d = cfg.data
    if not d.images or not d.labels:
        raise ConfigError(f"preset {cfg.preset!r} needs data.images and data.labels (IDX files)")
    for p in (d.images, d.labels):
        if not Path(p).exists():
            raise PrerequisiteError(f"IDX file {p} does not exist")
    full = data.load_idx(d.images, d.labels, d.classes, name=cfg.preset)
    rng = np.random.default_rng([cfg.seed, 3])
    train_idx, eval_idx = [], []
    for c in range(full.n_classes):
        idx = np.flatnonzero(full.labels == c)
        n_tr = min(d.n_train, max(len(idx) - d.n_eval, 0))
        if n_tr < 1 or len(idx) < n_tr + d.n_eval:
            raise ConfigError(f"class {c} has only {len(idx)} images; "
                              f"need n_train + n_eval = {d.n_train + d.n_eval}")
        pick = rng.permutation(idx)
        train_idx.append(np.sort(pick[:n_tr]))
        eval_idx.append(np.sort(pick[n_tr:n_tr + d.n_eval]))
    return full.subset(np.concatenate(train_idx)), full.subset(np.concatenate(eval_idx))


def make_datasets(cfg: PipelineConfig) -> tuple[data.Dataset, data.Dataset]:
    """Training and evaluation sets, the latter normalised with the training statistics."""
    d, s = cfg.data, cfg.seed
    if d.name == "two-moons":
        train = data.two_moons(d.n_train, d.noise_sd, seed=2 * s)
        ev = data.two_moons(d.n_eval, d.noise_sd, seed=2 * s + 1)
    elif d.name == "aniso":
        train = data.aniso_blobs(d.n_train, seed=2 * s)
        ev = data.aniso_blobs(d.n_eval, seed=2 * s + 1)
    else:
        train, ev = _split_idx(cfg)
    if d.normalize:
        train = train.normalized()
        ev = data.Dataset((ev.points - train.shift) / train.scale, ev.labels, ev.name,
                          train.shift, train.scale, dict(ev.meta))
    return train, ev


def stage_data(cfg: PipelineConfig, run_dir: Path) -> None:
    train, ev = make_datasets(cfg)
    norm = {"shift": None if train.shift is None else train.shift.tolist(),
            "scale": None if train.scale is None else train.scale.tolist()}
    for name, ds in (("data.csv", train), ("eval.csv", ev)):
        data.save_csv(ds, run_dir / name)
        _write_sidecar(run_dir / name, cfg, "data", rows=len(ds), normalization=norm)
    log.info("data: %d training and %d evaluation points", len(train), len(ev))


def stage_train(cfg: PipelineConfig, run_dir: Path) -> None:
    train = data.load_csv(_require(run_dir, "data.csv", "generate-data"))
    model, trace = vae_mod.train_stage1(train.points, cfg.train_config(),
                                        cfg.architecture_for(train.dim))
    path = run_dir / "model.json"
    vae_mod.save_model(model, path)
    _write_sidecar(path, cfg, "train")
    _write_rows(run_dir / "train_loss.csv", ["epoch", "loss"],
                ([i + 1, _fmt(v)] for i, v in enumerate(trace)))
    _write_sidecar(run_dir / "train_loss.csv", cfg, "train")
    log.info("train: reconstruction MSE %.5f", vae_mod.reconstruction_mse(model, train.points))


def stage_variance(cfg: PipelineConfig, run_dir: Path) -> None:
    train = data.load_csv(_require(run_dir, "data.csv", "generate-data"))
    model, _ = _load_model(run_dir, need_precision=False)
    z = vae_mod.encode(model, train.points).mean
    g = cfg.gmm
    mix = latentgmm.em_fit(z, g.K, seed=cfg.seed)
    prec = latentgmm.fit_Wg(model, mix, train.points, seed=cfg.seed, steps=g.wg_steps,
                            lr=g.wg_lr, n_samples=g.wg_samples, floor_ratio=g.floor_ratio)
    model.extra["precision"] = prec.to_dict()
    vae_mod.save_model(model, run_dir / "model.json")
    _write_sidecar(run_dir / "model.json", cfg, "variance")
    _write_latents(run_dir / "latents_train.csv", z, train.labels)
    _write_sidecar(run_dir / "latents_train.csv", cfg, "variance")
    log.info("fit-variance: K=%d, EM log-likelihood %.4f", g.K, mix.log_likelihoods[-1])


def stage_distances(cfg: PipelineConfig, run_dir: Path, jobs: int = 1) -> None:
    ev = data.load_csv(_require(run_dir, "eval.csv", "generate-data"))
    model, prec = _load_model(run_dir, need_precision=True)
    z = vae_mod.encode(model, ev.points).mean
    gen = GeneratorModel.from_vae(model, prec)
    geo = pairwise_distances(gen, z, cfg.geodesic_config(), jobs=jobs)
    geo.meta.update(_provenance(cfg, "distances"))
    geo.save(run_dir / "distances_geodesic.csv")
    euc = clustering.euclidean_latent_matrix(z)
    euc.meta.update(_provenance(cfg, "distances"))
    euc.save(run_dir / "distances_euclidean.csv")
    _write_latents(run_dir / "latent_scatter.csv", z, ev.labels)
    _write_sidecar(run_dir / "latent_scatter.csv", cfg, "distances")
    log.info("distances: %d pairs, %.1f%% converged", len(z) * (len(z) - 1) // 2,
             100 * geo.converged_fraction())


def stage_cluster(cfg: PipelineConfig, run_dir: Path) -> None:
    ev = data.load_csv(_require(run_dir, "eval.csv", "generate-data"))
    geo = DistanceMatrix.load(_require(run_dir, "distances_geodesic.csv", "distances"))
    euc = DistanceMatrix.load(_require(run_dir, "distances_euclidean.csv", "distances"))
    k = cfg.clustering.k or ev.n_classes
    if k != ev.n_classes:
        raise ConfigError(f"clustering.k={k} but the evaluation set has {ev.n_classes} classes")
    r = cfg.clustering.restarts
    labels = {
        "labels_geodesic.csv": clustering.kmedoids(geo, k, cfg.seed, r).labels,
        "labels_euclidean.csv": clustering.kmedoids(euc, k, cfg.seed, r).labels,
        "labels_spectral.csv": clustering.spectral_cluster(ev.points, k, cfg.seed),
    }
    for name, lab in labels.items():
        _write_rows(run_dir / name, ["index", "predicted", "truth"],
                    ([i, int(p), int(t)] for i, (p, t) in enumerate(zip(lab, ev.labels))))
        _write_sidecar(run_dir / name, cfg, "cluster", k=k)
    rows = []
    for method, samples, dist, fname in METHODS:
        acc = clustering.cluster_accuracy(labels[fname], ev.labels)
        rows.append([method, samples, dist, f"{acc:.6f}"])
    _write_rows(run_dir / "accuracy.csv", ["method", "data_samples", "distance", "accuracy"], rows)
    _write_sidecar(run_dir / "accuracy.csv", cfg, "cluster", k=k)
    log.info("cluster: %s", ", ".join(f"{r[0]} {r[3]}" for r in rows))


def stage_volume(cfg: PipelineConfig, run_dir: Path) -> None:
    if not cfg.volume.enabled:
        log.info("volume: disabled")
        return
    model, prec = _load_model(run_dir, need_precision=True)
    if model.d != 2:
        log.info("volume: latent dimension %d != 2, skipped", model.d)
        return
    z, _ = read_latents(_require(run_dir, "latents_train.csv", "fit-variance"))
    v = cfg.volume
    gen = GeneratorModel.from_vae(model, prec)
    field_ = geometry.volume_grid(gen, geometry.latent_bounds(z, v.inflate), v.resolution,
                                  S=v.samples, seed=cfg.seed)
    field_.save_csv(run_dir / "volume.csv")
    field_.save_pgm(run_dir / "volume.pgm")
    for name in ("volume.csv", "volume.pgm"):
        _write_sidecar(run_dir / name, cfg, "volume", h=field_.h, samples=v.samples)
    log.info("volume: %dx%d grid, h=%.4g", v.resolution, v.resolution, field_.h)


def read_accuracy(run_dir) -> list[tuple[str, str, str, float]]:
    _, rows = _read_rows(_require(Path(run_dir), "accuracy.csv", "cluster"))
    return [(m, s, d, float(a)) for m, s, d, a in rows]


def report_text(run_dir) -> str:
    """Accuracy table and convergence statistics; depends only on run-directory files."""
    run_dir = Path(run_dir)
    rows = read_accuracy(run_dir)
    geo = DistanceMatrix.load(_require(run_dir, "distances_geodesic.csv", "distances"))
    iu = np.triu_indices(geo.N, 1)
    iters = geo.iterations[iu] if geo.iterations is not None else np.zeros(len(iu[0]))
    conv = geo.converged[iu]
    lines = [
        f"preset {geo.meta.get('preset', '?')}  seed {geo.meta.get('seed', '?')}  "
        f"config {geo.meta.get('config_hash', '?')}",
        "",
        f"{'method':<10} {'data samples':<19} {'distance':<13} accuracy",
    ]
    lines += [f"{m:<10} {s:<19} {d:<13} {a:.4f}" for m, s, d, a in rows]
    lines += [
        "",
        f"geodesic pairs     {len(conv)}",
        f"converged          {conv.mean() if len(conv) else 1.0:.4f}",
        f"mean iterations    {iters.mean() if len(iters) else 0.0:.1f}",
        f"max iterations     {int(iters.max()) if len(iters) else 0}",
    ]
    return "\n".join(lines) + "\n"


def render_figures(run_dir) -> list[Path]:
    """PNG figures next to the CSVs, under ``figures/``."""
    from . import plotting

    run_dir = Path(run_dir)
    fig_dir = run_dir / "figures"
    out = []
    geo = DistanceMatrix.load(run_dir / "distances_geodesic.csv")
    euc = DistanceMatrix.load(run_dir / "distances_euclidean.csv")
    out.append(plotting.distance_matrices(geo.values, euc.values, fig_dir / "distances.png"))
    out.append(plotting.accuracy_bars([(m, a) for m, _, _, a in read_accuracy(run_dir)],
                                      fig_dir / "accuracy.png"))
    if (run_dir / "train_loss.csv").exists():
        _, rows = _read_rows(run_dir / "train_loss.csv")
        out.append(plotting.loss_curve([float(r[1]) for r in rows], fig_dir / "loss.png"))
    z, truth = read_latents(run_dir / "latent_scatter.csv")
    if z.shape[1] == 2:
        sets = {}
        for method, _, _, fname in METHODS:
            _, rows = _read_rows(run_dir / fname)
            sets[method] = [int(r[1]) for r in rows]
        out.append(plotting.cluster_panels(z, sets, fig_dir / "clusters.png", truth=truth))
    if (run_dir / "volume.csv").exists():
        vf = geometry.VolumeField.load_csv(run_dir / "volume.csv")
        out.append(plotting.field_heatmap(vf.xs, vf.ys, vf.log_values, fig_dir / "volume.png",
                                          "expected volume", latents=z, cbar_label="log volume"))
        model, prec = _load_model(run_dir, need_precision=True)
        gx, gy = np.meshgrid(vf.xs, vf.ys)
        var = prec.mean_variance(np.column_stack([gx.ravel(), gy.ravel()]))
        out.append(plotting.field_heatmap(vf.xs, vf.ys, np.log(var).reshape(gx.shape),
                                          fig_dir / "variance.png", "generator variance",
                                          latents=z, cbar_label="log mean variance"))
    return out


def stage_report(cfg: PipelineConfig | None, run_dir: Path) -> str:
    text = report_text(run_dir)
    (run_dir / "report.txt").write_text(text)
    figures = render_figures(run_dir)
    if cfg is not None:
        _write_sidecar(run_dir / "report.txt", cfg, "report",
                       figures=[str(p.relative_to(run_dir)) for p in figures])
    print(text, end="")
    return text


def run(cfg: PipelineConfig, run_dir, stages=STAGES, jobs: int = 1) -> Path:
    """Execute ``stages`` in pipeline order inside ``run_dir``."""
    run_dir = Path(run_dir)
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    for stage in STAGES:
        if stage not in stages:
            continue
        log.info("stage %s", stage)
        if stage == "distances":
            stage_distances(cfg, run_dir, jobs=jobs)
        elif stage == "report":
            stage_report(cfg, run_dir)
        else:
            globals()[f"stage_{stage}"](cfg, run_dir)
    return run_dir


def render_heatmap_file(src, dst) -> Path:
    """PGM heatmap of a volume CSV (log-volume) or a plain numeric matrix CSV."""
    src = Path(src)
    with src.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise data.DataError(f"{src}: empty file")
    if rows[0][:4] == ["x", "y", "vol", "log_vol"]:
        values = geometry.VolumeField.load_csv(src).log_values[::-1]
    else:
        body = rows[1:] if rows[0][0].startswith("#") else rows
        widths = {len(r) for r in body}
        if len(widths) != 1:
            raise data.DataError(f"{src}: rows have differing lengths {sorted(widths)}")
        try:
            values = np.array(body, dtype=np.float64)
        except ValueError as exc:
            raise data.DataError(f"{src}: {exc}") from None
    geometry.render_heatmap(values, dst)
    return Path(dst)
