import numpy as np
import pytest

from geoclus import data, geodesic, latentgmm, vae

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def moons_model():
    """Two-moons VAE with fitted variance model, shared by the slower tests."""
    train = data.two_moons(100, seed=0).normalized()
    arch = vae.VaeArchitecture(2, senc_activation="softplus", output_variance=0.01)
    model, trace = vae.train_stage1(train.points, vae.TrainConfig(epochs=500, seed=0), arch)
    z = vae.encode(model, train.points).mean
    mix = latentgmm.em_fit(z, 10, seed=0)
    prec = latentgmm.fit_Wg(model, mix, train.points, seed=0)
    gen = geodesic.GeneratorModel.from_vae(model, prec)
    return {"train": train, "model": model, "trace": trace, "latents": z,
            "mixture": mix, "precision": prec, "generator": gen}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))
