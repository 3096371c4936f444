import struct

import numpy as np
import pytest

from geoclus import data


# -- two moons ----------------------------------------------------------------------

def test_moons_parametric_endpoints():
    ds = data.two_moons(1, noise_sd=0.0, seed=0, thetas=[0.0])
    assert np.allclose(ds.points, [[1.0, 0.0], [0.0, 0.5]], atol=1e-15)
    assert ds.labels.tolist() == [0, 1]


def test_moons_upper_half_tail_bound():
    sd = 0.08
    ds = data.two_moons(2000, noise_sd=sd, seed=3)
    moon0 = ds.points[ds.labels == 0]
    # P(y < -3 sd) <= 0.135% per point; allow generous slack
    assert np.mean(moon0[:, 1] < -3 * sd) < 0.005


def test_moons_ordering_and_determinism():
    a, b = data.two_moons(30, seed=5), data.two_moons(30, seed=5)
    assert np.array_equal(a.points, b.points)
    assert a.labels[:30].tolist() == [0] * 30 and a.labels[30:].tolist() == [1] * 30
    assert not np.array_equal(a.points, data.two_moons(30, seed=6).points)


def test_moons_rejects_bad_args():
    with pytest.raises(ValueError):
        data.two_moons(0)
    with pytest.raises(ValueError):
        data.two_moons(5, noise_sd=-1.0)


# -- anisotropic blobs ----------------------------------------------------------------

def test_aniso_covariance_is_shear_gram():
    n = 10_000
    ds = data.aniso_blobs(n, seed=1, centers=np.zeros((1, 2)))
    cov = np.cov(ds.points.T)
    target = data.SHEAR @ data.SHEAR.T
    # standard error of a covariance entry is about sqrt(2/n) times its scale
    assert np.max(np.abs(cov - target)) < 5 * np.sqrt(2.0 / n)


def test_aniso_three_points_one_per_cluster():
    ds = data.aniso_blobs(3, seed=0)
    assert ds.labels.tolist() == [0, 1, 2]


def test_aniso_sizes_and_determinism():
    ds = data.aniso_blobs(100, seed=2)
    assert np.bincount(ds.labels).tolist() == [34, 33, 33]
    assert np.array_equal(ds.points, data.aniso_blobs(100, seed=2).points)
    with pytest.raises(ValueError):
        data.aniso_blobs(2)


def test_normalization_is_global_and_recorded():
    ds = data.aniso_blobs(60, seed=0)
    nd = ds.normalized()
    assert np.allclose(nd.points.mean(axis=0), 0.0, atol=1e-12)
    assert np.isclose(np.mean(nd.points ** 2), 1.0)
    assert np.allclose(nd.points * nd.scale + nd.shift, ds.points)
    assert nd.scale[0] == nd.scale[1]


# -- IDX ------------------------------------------------------------------------------

def test_idx_single_image_scaling(tmp_path):
    data.write_idx(np.array([[[0, 255], [0, 255]]]), np.array([3]),
                   tmp_path / "img", tmp_path / "lab")
    ds = data.load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.points.tolist() == [[0.0, 1.0, 0.0, 1.0]]
    assert ds.labels.tolist() == [0]
    assert ds.meta["classes"] == [3]


def test_idx_filter_and_limit(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, 400)
    images = rng.integers(0, 256, (400, 3, 3))
    data.write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
    ds = data.load_idx(tmp_path / "img", tmp_path / "lab", class_filter=[0, 1], per_class_limit=50)
    assert len(ds) <= 100
    assert set(ds.labels.tolist()) <= {0, 1}
    assert ds.dim == 9
    # rows keep file order
    first = np.flatnonzero(np.isin(labels, [0, 1]))[0]
    assert np.allclose(ds.points[0], images[first].ravel() / 255.0)


def test_idx_bad_magic_names_offset(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x0803FFFF, 1, 1, 1) + b"\x00")
    (tmp_path / "lab").write_bytes(struct.pack(">II", data.IDX_LABELS_MAGIC, 1) + b"\x00")
    with pytest.raises(data.DataError, match="offset 0"):
        data.load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated_and_count_mismatch(tmp_path):
    data.write_idx(np.zeros((2, 2, 2)), np.zeros(2), tmp_path / "img", tmp_path / "lab")
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(data.DataError, match="truncated"):
        data.load_idx(tmp_path / "short", tmp_path / "lab")
    data.write_idx(np.zeros((3, 2, 2)), np.zeros(3), tmp_path / "img3", tmp_path / "lab3")
    with pytest.raises(data.DataError, match="does not match"):
        data.load_idx(tmp_path / "img", tmp_path / "lab3")


# -- CSV ------------------------------------------------------------------------------

def test_csv_matrix_round_trip(tmp_path):
    m = np.random.default_rng(1).standard_normal((7, 4)) * 1e3
    data.save_csv(m, tmp_path / "m.csv")
    back = data.load_csv(tmp_path / "m.csv")
    assert np.max(np.abs(back - m)) < 1e-15 * np.max(np.abs(m))
    assert (tmp_path / "m.csv").read_text().splitlines()[0].startswith("# kind=matrix")


def test_csv_dataset_round_trip(tmp_path):
    ds = data.two_moons(5, seed=0)
    data.save_csv(ds, tmp_path / "d.csv")
    back = data.load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.points, ds.points)
    assert np.array_equal(back.labels, ds.labels)


def test_csv_empty_rejected(tmp_path):
    with pytest.raises(data.DataError):
        data.save_csv(np.zeros((0, 3)), tmp_path / "e.csv")
    (tmp_path / "e.csv").write_text("# kind=matrix,rows=0,cols=0\n")
    with pytest.raises(data.CsvParseError, match="empty"):
        data.load_csv(tmp_path / "e.csv")


def test_csv_non_numeric_reports_cell(tmp_path):
    (tmp_path / "bad.csv").write_text("# kind=matrix,rows=2,cols=2\n1,2\n3,oops\n")
    with pytest.raises(data.CsvParseError, match=r"row 3, column 2"):
        data.load_csv(tmp_path / "bad.csv")
