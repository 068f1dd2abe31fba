import numpy as np
import pytest

from pedfit.body_model import BodyParams, default_template
from pedfit.stereo import StereoRig


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture(scope="session")
def template64():
    return default_template(64)


@pytest.fixture(scope="session")
def rig():
    return StereoRig.default()


@pytest.fixture(scope="session")
def priors():
    from pedfit.synth import default_priors

    return default_priors()


def random_params(rng, template, scale=0.3, distance=20.0):
    p = BodyParams.zeros(template.n_shape)
    p.pose = rng.normal(0.0, scale, p.pose.shape)
    p.shape = rng.normal(0.0, 0.5, p.shape.shape)
    p.translation = np.array([rng.uniform(-1, 1), 0.0, distance])
    return p


def random_gmm(rng, dim, n_components=3, frame_interval=None):
    from pedfit.priors import GmmModel

    A = rng.normal(size=(n_components, dim, dim)) / np.sqrt(dim)
    covs = 0.05 * (A @ np.transpose(A, (0, 2, 1)) + np.eye(dim))
    return GmmModel(rng.dirichlet(np.ones(n_components)), rng.normal(0, 0.2, (n_components, dim)), covs,
                    frame_interval)


def fd_relative_error(f, x, grad, h=1e-5):
    """Relative error between ``grad`` and a central-difference gradient of ``f`` at ``x``."""
    num = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (f(xp) - f(xm)) / (2 * h)
    scale = max(np.linalg.norm(num), np.linalg.norm(grad))
    return 0.0 if scale == 0 else float(np.linalg.norm(grad - num) / scale)


ACCEPTANCE = []


def report(number, ok, detail):
    """Record and print one acceptance line; fails the calling test when ``ok`` is false."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
