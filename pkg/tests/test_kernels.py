"""Backend equivalence: the compiled kernels against the NumPy reference."""

import numpy as np
import pytest

from markovflow import kernels
from markovflow.kernels import backends


@pytest.fixture(scope="module")
def impls():
    return backends()


def test_backend_selected():
    assert kernels.BACKEND in ("compiled", "numpy")


def test_thomas_matches_dense():
    rng = np.random.default_rng(11)
    for n in (3, 17, 500):
        lower = -rng.random(n - 1)
        upper = -rng.random(n - 1)
        diag = 2.5 + rng.random(n)
        rhs = rng.standard_normal(n)
        dense = np.diag(diag) + np.diag(lower, -1) + np.diag(upper, 1)
        expected = np.linalg.solve(dense, rhs)
        got = kernels.thomas_solve(lower, diag, upper, rhs)
        assert np.allclose(got, expected, atol=1e-11)


def test_thomas_backend_parity(impls):
    if len(impls) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(5)
    n = 301
    lower = -rng.random(n - 1)
    upper = -rng.random(n - 1)
    diag = 2.0 + rng.random(n)
    rhs = rng.standard_normal(n)
    a = impls["numpy"].thomas_solve(lower, diag, upper, rhs)
    b = impls["compiled"].thomas_solve(lower, diag, upper, rhs)
    assert np.max(np.abs(a - b)) < 1e-12


@pytest.mark.parametrize("theta,rannacher", [(1.0, 0), (0.5, 2)])
@pytest.mark.parametrize("time_dep", [False, True])
def test_fp_propagate_backend_parity(impls, theta, rannacher, time_dep):
    if len(impls) < 2:
        pytest.skip("compiled extension not built")
    n, steps = 400, 25
    x = np.linspace(-10, 10, n)
    h = x[1] - x[0]
    p0 = np.exp(-0.5 * x**2)
    p0 /= np.trapezoid(p0, x)
    if time_dep:
        mu = np.array([np.clip(-x * (1 + 0.1 * k), -50, 50) for k in range(steps)])
    else:
        mu = np.clip(-x, -50, 50)
    a, da = impls["numpy"].fp_propagate(p0, mu, h, 0.01, steps, theta, rannacher)
    b, db = impls["compiled"].fp_propagate(p0, mu, h, 0.01, steps, theta, rannacher)
    assert np.max(np.abs(a - b)) < 1e-12
    assert da < 1e-10 and db < 1e-10


def test_euler_paths_backend_parity(impls):
    if len(impls) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(17)
    n, steps, paths = 200, 12, 4000
    x_nodes = np.linspace(-5, 5, n)
    h = x_nodes[1] - x_nodes[0]
    mu = np.tanh(x_nodes)
    x0 = rng.standard_normal(paths)
    z = rng.standard_normal((steps, paths))
    a = impls["numpy"].euler_paths(x0.copy(), z, mu, x_nodes[0], h, 0.01)
    b = impls["compiled"].euler_paths(x0.copy(), z, mu, x_nodes[0], h, 0.01)
    assert np.max(np.abs(a - b)) < 1e-12


def test_euler_paths_time_dependent_parity(impls):
    if len(impls) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(23)
    n, steps, paths = 100, 8, 1500
    x_nodes = np.linspace(-4, 4, n)
    h = x_nodes[1] - x_nodes[0]
    mu = np.array([np.sin(x_nodes + 0.3 * k) for k in range(steps)])
    x0 = 0.5 * rng.standard_normal(paths)
    z = rng.standard_normal((steps, paths))
    a = impls["numpy"].euler_paths(x0.copy(), z, mu, x_nodes[0], h, 0.02)
    b = impls["compiled"].euler_paths(x0.copy(), z, mu, x_nodes[0], h, 0.02)
    assert np.max(np.abs(a - b)) < 1e-12


def test_euler_paths_edge_clamping():
    # drift lookups outside the grid must clamp to the edge values
    x_nodes = np.linspace(0.0, 1.0, 11)
    mu = np.linspace(1.0, 2.0, 11)
    x0 = np.array([-5.0, 5.0])
    z = np.zeros((1, 2))
    out = kernels.euler_paths(x0.copy(), z, mu, 0.0, 0.1, 1.0)
    assert out[0] == pytest.approx(-5.0 + 1.0)
    assert out[1] == pytest.approx(5.0 + 2.0)


def test_pure_python_env_override():
    import subprocess
    import sys

    code = (
        "import os; os.environ['MARKOVFLOW_PURE_PYTHON']='1';"
        "from markovflow import kernels; print(kernels.BACKEND)"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"
