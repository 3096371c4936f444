"""Datasets: synthetic generators, IDX ingestion and CSV round-tripping."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHEAR = np.array([[0.6, -0.6], [-0.4, 0.8]])
# centres of the classic scikit-learn anisotropic-blobs demo (make_blobs, random_state=170)
ANISO_CENTERS = np.array([[-8.94709165, -5.46276435],
                          [-4.58938989, 0.08876178],
                          [1.93875432, 0.50513613]])

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    pass


class CsvParseError(DataError):
    pass


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2:
            raise DataError(f"points must be N x D, got shape {self.points.shape}")
        if len(self.labels) != len(self.points):
            raise DataError("labels and points differ in length")
        if not np.all(np.isfinite(self.points)):
            raise DataError("points contain non-finite values")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def normalized(self) -> "Dataset":
        """Centre, then divide by one global scale so shapes keep their aspect."""
        shift = self.points.mean(axis=0)
        s = float(np.sqrt(np.mean((self.points - shift) ** 2)))
        s = s if s > 0 else 1.0
        scale = np.full(self.dim, s)
        return Dataset((self.points - shift) / scale, self.labels.copy(), self.name,
                       shift, scale, dict(self.meta))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.points[idx], self.labels[idx], self.name,
                       self.shift, self.scale, dict(self.meta))


def two_moons(n_per_moon: int = 100, noise_sd: float = 0.08, seed: int = 0,
              thetas: np.ndarray | None = None) -> Dataset:
    """Two interleaved half circles; moon 0 occupies indices [0, n)."""
    if n_per_moon < 1 or noise_sd < 0:
        raise ValueError("n_per_moon must be >= 1 and noise_sd >= 0")
    rng = np.random.default_rng(seed)
    if thetas is None:
        theta0 = rng.uniform(0.0, np.pi, n_per_moon)
        theta1 = rng.uniform(0.0, np.pi, n_per_moon)
    else:
        theta0 = theta1 = np.broadcast_to(np.asarray(thetas, dtype=np.float64), (n_per_moon,))
    moon0 = np.column_stack([np.cos(theta0), np.sin(theta0)])
    moon1 = np.column_stack([1.0 - np.cos(theta1), 0.5 - np.sin(theta1)])
    points = np.vstack([moon0, moon1])
    points = points + noise_sd * rng.standard_normal(points.shape)
    labels = np.repeat([0, 1], n_per_moon)
    return Dataset(points, labels, "two-moons", meta={"noise_sd": noise_sd, "seed": seed})


def aniso_blobs(n_total: int = 300, seed: int = 0, cluster_sd: float = 1.0,
                centers: np.ndarray = ANISO_CENTERS, shear: np.ndarray = SHEAR) -> Dataset:
    """Spherical Gaussian clusters mapped through a fixed shear ``y = T x``.

    Cluster sizes differ by at most one; earlier clusters take the remainder.
    """
    centers = np.asarray(centers, dtype=np.float64)
    k = len(centers)
    if n_total < k:
        raise ValueError(f"n_total must be at least {k}")
    rng = np.random.default_rng(seed)
    sizes = [n_total // k + (1 if i < n_total % k else 0) for i in range(k)]
    labels = np.repeat(np.arange(k), sizes)
    raw = centers[labels] + cluster_sd * rng.standard_normal((n_total, centers.shape[1]))
    points = raw @ np.asarray(shear).T
    return Dataset(points, labels, "aniso", meta={"seed": seed, "cluster_sd": cluster_sd})


def stratified_subset(ds: Dataset, per_class: int, seed: int) -> np.ndarray:
    """Indices of ``per_class`` random points from each class, grouped by class."""
    rng = np.random.default_rng(seed)
    out = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        take = min(per_class, len(idx))
        out.append(np.sort(rng.choice(idx, size=take, replace=False)))
    return np.concatenate(out)


def balanced_counts(n_total: int, k: int) -> list[int]:
    return [n_total // k + (1 if i < n_total % k else 0) for i in range(k)]


# -- IDX -------------------------------------------------------------------------

def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at offset 0")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x} at offset 0 (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise DataError(f"{path}: truncated data at offset {header + len(payload)}, "
                        f"expected {need} bytes of payload")
    return dims, payload[:need]


def load_idx(images_path, labels_path, class_filter=None,
             per_class_limit: int | None = None, name: str = "idx") -> Dataset:
    """Read an IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    img_dims, img_bytes = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    (n_labels,), lab_bytes = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    n, rows, cols = img_dims
    if n != n_labels:
        raise DataError(f"image count {n} does not match label count {n_labels}")
    images = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n, rows * cols)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)

    classes = sorted(set(labels.tolist())) if class_filter is None else list(class_filter)
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        keep.append(idx if per_class_limit is None else idx[:per_class_limit])
    keep = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=np.int64)
    # relabel to 0..k-1 in class_filter order
    remap = {c: i for i, c in enumerate(classes)}
    new_labels = np.array([remap[int(l)] for l in labels[keep]], dtype=np.int64)
    points = images[keep].astype(np.float64) / 255.0
    return Dataset(points, new_labels, name, meta={"classes": [int(c) for c in classes]})


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
                                  + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + labels.tobytes())


# -- CSV -------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_csv(value, path) -> None:
    """Write a matrix or Dataset; the first line records kind and shape."""
    path = Path(path)
    if isinstance(value, Dataset):
        arr, kind = value.points, "dataset"
    else:
        arr, kind = np.asarray(value, dtype=np.float64), "matrix"
        if arr.ndim == 1:
            arr = arr[:, None]
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"refusing to write empty or non-2-D array of shape {arr.shape}")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# kind={kind}", f"rows={arr.shape[0]}", f"cols={arr.shape[1]}"])
        if kind == "dataset":
            w.writerow([f"x{j}" for j in range(arr.shape[1])] + ["label"])
            for row, lab in zip(arr, value.labels):
                w.writerow([_fmt(x) for x in row] + [int(lab)])
        else:
            for row in arr:
                w.writerow([_fmt(x) for x in row])


def load_csv(path):
    """Inverse of :func:`save_csv`: returns an ndarray or a Dataset."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or not rows[0][0].startswith("# kind="):
        raise CsvParseError(f"{path}: missing '# kind=' header on row 1")
    head = dict(cell.lstrip("# ").split("=", 1) for cell in rows[0])
    kind, n, m = head["kind"], int(head["rows"]), int(head["cols"])
    body = rows[2:] if kind == "dataset" else rows[1:]
    first_row = 3 if kind == "dataset" else 2
    if n == 0 or m == 0 or not body:
        raise CsvParseError(f"{path}: empty matrix")
    if len(body) != n:
        raise CsvParseError(f"{path}: header says {n} rows, found {len(body)}")
    width = m + 1 if kind == "dataset" else m
    values = np.empty((n, width))
    for i, row in enumerate(body):
        if len(row) != width:
            raise CsvParseError(f"{path}: row {i + first_row} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise CsvParseError(f"{path}: non-numeric cell {cell!r} at row {i + first_row}, "
                                    f"column {j + 1}") from None
    if kind == "dataset":
        return Dataset(values[:, :m], values[:, m].astype(np.int64), path.stem)
    return values
