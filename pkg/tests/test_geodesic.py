import numpy as np
import pytest

from geoclus import data
from geoclus import diffcore as dc
from geoclus import geodesic as g
from geoclus import latentgmm as lg
from geoclus import vae

from conftest import rel_err

TIGHT = g.GeodesicConfig(convergence_tol=1e-12, max_iterations=5000)


def random_generator(seed, D=3):
    """Random small VAE decoder with a random two-component precision model."""
    rng = np.random.default_rng(seed)
    model = vae.init_vae(vae.VaeArchitecture(D, 2, (6,), "tanh"), seed=seed)
    prec = lg.PrecisionGmm(np.array([0.3, 0.7]), rng.normal(size=(2, 2)),
                           rng.uniform(0.3, 1.5, size=(2, 2)), rng.uniform(0.5, 3.0, size=D), 1e-3)
    return g.GeneratorModel.from_vae(model, prec)


def mc_segment(model, zi, zj, n, rng):
    eps = rng.standard_normal((2, n, model.D))
    fi = model.sample(zi, eps[0])
    fj = model.sample(zj, eps[1])
    sq = np.sum((fi - fj) ** 2, axis=1)
    return sq.mean(), sq.std(ddof=1) / np.sqrt(n)


# -- curves ---------------------------------------------------------------------------

def test_curve_straight_line():
    c = g.QuadraticCurve.straight([0.0, 1.0], [2.0, -1.0])
    t = np.linspace(0, 1, 7)
    expected = (1 - t)[:, None] * c.z0 + t[:, None] * c.z1
    assert np.allclose(c(t), expected, atol=1e-15)


def test_curve_endpoints_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z0, z1, a = rng.normal(size=(3, 4)) * 10
        c = g.QuadraticCurve(z0, z1, a)
        assert np.array_equal(c(0.0), z0) and np.array_equal(c(1.0), z1)


def test_curve_substitution():
    c = g.QuadraticCurve([0.0], [1.0], [4.0])
    assert c(0.5)[0] == pytest.approx(-0.5)


def test_curve_t_out_of_range():
    c = g.QuadraticCurve.straight([0.0], [1.0])
    with pytest.raises(ValueError):
        c(1.5)


def test_curve_shape_validation():
    with pytest.raises(ValueError):
        g.QuadraticCurve([0.0, 1.0], [1.0], [0.0])


# -- closed-form segment energy ----------------------------------------------------------

def test_segment_same_point_is_noise_floor():
    m = random_generator(0)
    z = np.array([0.3, -0.2])
    assert g.segment_expected_sq(m, z, z) == pytest.approx(2 * m.variance(z).sum(), rel=1e-14)


def test_segment_linear_noise_free():
    m = g.GeneratorModel.linear([[2.0]])
    assert g.segment_expected_sq(m, np.array([0.0]), np.array([1.0])) == pytest.approx(4.0)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_segment_matches_monte_carlo(seed):
    m = random_generator(seed)
    rng = np.random.default_rng(100 + seed)
    zi, zj = rng.normal(size=(2, 2))
    mean, se = mc_segment(m, zi, zj, 100_000, rng)
    assert abs(mean - g.segment_expected_sq(m, zi, zj)) < 3 * se


def test_generator_model_dimension_check():
    m = vae.init_vae(vae.VaeArchitecture(3, 2, (4,)), seed=0)
    p = lg.PrecisionGmm(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)), np.ones(4), 1e-3)
    with pytest.raises(ValueError):
        g.GeneratorModel.from_vae(m, p)


# -- energy -----------------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 5, 16])
def test_energy_flat_closed_form(n):
    s, D = 0.3, 2
    m = g.GeneratorModel.identity(D, variance=s)
    c = g.QuadraticCurve.straight([0.0, 1.0], [3.0, -1.0])
    expected = np.sum((c.z1 - c.z0) ** 2) / n + 2 * n * s * D
    assert g.expected_energy(m, c, n) == pytest.approx(expected, rel=1e-14)


def test_energy_halves_with_doubled_segments():
    m = g.GeneratorModel.identity(3)
    c = g.QuadraticCurve.straight([0.0, 1.0, 2.0], [1.0, -1.0, 0.5])
    assert g.expected_energy(m, c, 20) == pytest.approx(g.expected_energy(m, c, 10) / 2, rel=1e-14)


def test_energy_non_negative():
    rng = np.random.default_rng(0)
    m = random_generator(4)
    for _ in range(20):
        c = g.QuadraticCurve(*rng.normal(size=(3, 2)) * 3)
        assert g.expected_energy(m, c, 8) >= 0


def test_energy_rejects_one_segment():
    with pytest.raises(ValueError):
        g.expected_energy(g.GeneratorModel.identity(2), g.QuadraticCurve.straight([0, 0], [1, 1]), 1)


def test_energy_gradient():
    m = random_generator(5)
    rng = np.random.default_rng(5)
    c = g.QuadraticCurve(*rng.normal(size=(3, 2)))
    _, grad = g.energy_and_grad(m, c, 10)
    h = 1e-5
    num = np.zeros(2)
    for k in range(2):
        up, dn = c.a.copy(), c.a.copy()
        up[k] += h
        dn[k] -= h
        num[k] = (g.expected_energy(m, g.QuadraticCurve(c.z0, c.z1, up), 10)
                  - g.expected_energy(m, g.QuadraticCurve(c.z0, c.z1, dn), 10)) / (2 * h)
    assert rel_err(grad, num) < 1e-4


# -- initialiser -----------------------------------------------------------------------

def test_algorithm1_constant_precision():
    # one very broad component: the variance is practically constant
    p = lg.PrecisionGmm(np.array([1.0]), np.zeros((1, 2)), np.full((1, 2), 1e8), np.ones(2), 1e-30)
    m = g.GeneratorModel(lambda z: z, p.variance_graph, 2, 2, p)
    z0, z1 = np.array([-1.0, 0.0]), np.array([1.0, 0.5])
    c = g.init_curve_algorithm1(m, z0, z1, seed=0)
    straight = g.QuadraticCurve.straight(z0, z1)
    assert g.initial_cost(m, c) <= 1.05 * g.initial_cost(m, straight)


def test_algorithm1_deterministic():
    m = random_generator(6)
    a = g.init_curve_algorithm1(m, np.zeros(2), np.ones(2), seed=3)
    b = g.init_curve_algorithm1(m, np.zeros(2), np.ones(2), seed=3)
    assert np.array_equal(a.a, b.a)


def moon_tips(moons_model):
    """Latent codes of the two ends of the first moon."""
    train, z = moons_model["train"], moons_model["latents"]
    moon0 = np.flatnonzero(train.labels == 0)
    x = train.points[moon0, 0]
    return z[moon0[np.argmin(x)]], z[moon0[np.argmax(x)]]


def test_algorithm1_prefers_data_region(moons_model):
    m = moons_model["generator"]
    z0, z1 = moon_tips(moons_model)
    c = g.init_curve_algorithm1(m, z0, z1, seed=0)
    assert g.initial_cost(m, c) < g.initial_cost(m, g.QuadraticCurve.straight(z0, z1))


# -- optimisation -------------------------------------------------------------------------

def test_flat_geometry_optimum_is_straight():
    rng = np.random.default_rng(0)
    m = g.GeneratorModel.identity(2, variance=0.1)
    z0, z1 = rng.normal(size=(2, 2))
    r = g.optimize_geodesic(m, g.QuadraticCurve(z0, z1, rng.normal(size=2)), TIGHT)
    assert np.linalg.norm(r.curve.a) < 1e-3
    assert r.converged and r.energy <= r.initial_energy


def test_flat_geometry_energy_minimum_analytic():
    m = g.GeneratorModel.identity(2)
    z0, z1 = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    e0 = g.expected_energy(m, g.QuadraticCurve.straight(z0, z1), 16)
    for a in np.random.default_rng(1).normal(size=(10, 2)):
        assert g.expected_energy(m, g.QuadraticCurve(z0, z1, a), 16) > e0


def test_identical_endpoints_stay_at_noise_floor():
    m = g.GeneratorModel.identity(2, variance=0.2)
    z = np.array([0.5, 0.5])
    r = g.optimize_geodesic(m, g.QuadraticCurve.straight(z, z), g.GeodesicConfig())
    assert r.energy == pytest.approx(2 * 16 * 0.2 * 2, rel=1e-12)


def test_optimized_energy_below_straight(moons_model):
    m = moons_model["generator"]
    z0, z1 = moon_tips(moons_model)
    straight = g.QuadraticCurve.straight(z0, z1)
    init = g.init_curve_algorithm1(m, z0, z1, seed=0)
    r = g.optimize_geodesic(m, init, g.GeodesicConfig())
    assert r.energy < g.expected_energy(m, straight, 16)
    assert r.energy <= r.initial_energy
    assert np.array_equal(r.curve(0.0), z0) and np.array_equal(r.curve(1.0), z1)


def test_non_finite_energy_falls_back_to_straight():
    m = g.GeneratorModel(lambda z: dc.exp(z * 10.0), None, 1, 1)
    r = g.optimize_curves(m, np.array([[0.0]]), np.array([[1.0]]), np.array([[-1e3]]),
                          g.GeodesicConfig())
    assert r.failed[0] and not r.converged[0]
    assert r.a[0, 0] == 0.0 and np.isfinite(r.energy[0])


# -- distances --------------------------------------------------------------------------

def test_distance_identical_endpoints_is_zero():
    m = g.GeneratorModel.identity(2, variance=0.3)
    assert g.geodesic_distance(m, np.ones(2), np.ones(2), g.GeodesicConfig()) == 0.0


def test_distance_flat_is_euclidean():
    rng = np.random.default_rng(3)
    m = g.GeneratorModel.identity(3)
    z0, z1 = rng.normal(size=(2, 3))
    d = g.geodesic_distance(m, z0, z1, g.GeodesicConfig())
    assert abs(d - np.linalg.norm(z1 - z0)) < 1e-6


@pytest.mark.parametrize("s", [0.5, 3.0])
def test_distance_scales_with_mean_map(s):
    A = np.array([[1.0, 0.5], [0.0, 2.0], [1.0, -1.0]])
    z0, z1 = np.array([0.2, -0.3]), np.array([1.0, 0.4])
    cfg = g.GeodesicConfig()
    d1 = g.geodesic_distance(g.GeneratorModel.linear(A), z0, z1, cfg)
    ds = g.geodesic_distance(g.GeneratorModel.linear(s * A), z0, z1, cfg)
    assert ds == pytest.approx(s * d1, rel=1e-10)


def test_pairwise_identical_points():
    dm = g.pairwise_distances(g.GeneratorModel.identity(2, 0.1), np.ones((2, 2)), g.GeodesicConfig())
    assert np.array_equal(dm.values, np.zeros((2, 2)))


def test_pairwise_flat_equals_euclidean():
    z = np.random.default_rng(4).normal(size=(12, 2))
    dm = g.pairwise_distances(g.GeneratorModel.identity(2), z, g.GeodesicConfig())
    euc = np.linalg.norm(z[:, None] - z[None], axis=2)
    assert np.max(np.abs(dm.values - euc)) < 1e-6
    assert dm.kind == "geodesic" and dm.converged_fraction() == 1.0


def test_pairwise_independent_of_jobs_and_chunking():
    m = random_generator(7)
    z = np.random.default_rng(7).normal(size=(8, 2))
    base = g.GeodesicConfig(max_iterations=60, batch_pairs=512)
    small = g.GeodesicConfig(max_iterations=60, batch_pairs=5)
    a = g.pairwise_distances(m, z, base)
    b = g.pairwise_distances(m, z, small, jobs=2)
    assert np.allclose(a.values, b.values, rtol=1e-12, atol=0)
    assert np.array_equal(a.values, a.values.T) and not np.diag(a.values).any()


@pytest.mark.slow
def test_pairwise_block_structure(moons_model):
    # 50+50 held-out points, normalised with the training statistics
    train = moons_model["train"]
    ev = data.two_moons(50, seed=1)
    z = vae.encode(moons_model["model"], (ev.points - train.shift) / train.scale).mean
    dm = g.pairwise_distances(moons_model["generator"], z, g.GeodesicConfig())
    same = ev.labels[:, None] == ev.labels[None, :]
    off = ~np.eye(len(z), dtype=bool)
    assert dm.values[~same].mean() > 2 * dm.values[same & off].mean()


def test_distance_matrix_round_trip(tmp_path):
    m = random_generator(8)
    z = np.random.default_rng(8).normal(size=(5, 2))
    dm = g.pairwise_distances(m, z, g.GeodesicConfig(max_iterations=30))
    path = tmp_path / "d.csv"
    dm.save(path)
    back = g.DistanceMatrix.load(path)
    assert np.array_equal(back.values, dm.values)
    assert np.array_equal(back.converged, dm.converged)
    assert np.array_equal(back.iterations, dm.iterations)
    assert back.meta["seed"] == 0 and back.kind == "geodesic"
    assert g.sidecar_path(path).exists()


@pytest.mark.parametrize("values", [
    [[0.0, 1.0], [2.0, 0.0]],
    [[1.0, 1.0], [1.0, 0.0]],
    [[0.0, -1.0], [-1.0, 0.0]],
    [[0.0, np.nan], [np.nan, 0.0]],
])
def test_distance_matrix_validation(values):
    with pytest.raises(ValueError):
        g.DistanceMatrix(np.array(values), "geodesic")
