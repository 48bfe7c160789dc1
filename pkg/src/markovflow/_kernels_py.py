"""Pure-NumPy reference implementation of the hot kernels.

Semantics must match markovflow._kernels (the Cython twin) bit-for-bit in
exact arithmetic; the equivalence suite in tests/test_kernels.py compares
the two to tight tolerances.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

BACKEND = "numpy"


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (e^z - 1), stable near 0 and for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-5
    zs = z[small]
    out[small] = 1.0 - 0.5 * zs + zs * zs / 12.0
    big = z > 30.0
    out[big] = z[big] * np.exp(-z[big])
    rest = ~(small | big)
    out[rest] = z[rest] / np.expm1(z[rest])
    return out


def thomas_solve(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
                 rhs: np.ndarray) -> np.ndarray:
    """Solve the tridiagonal system (lower, diag, upper) x = rhs."""
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    return solve_banded((1, 1), ab, rhs)


def _sg_coefficients(mu: np.ndarray, h: float):
    """Scharfetter-Gummel face coefficients for flux mu*p - 0.5*p_x."""
    mu_face = 0.5 * (mu[:-1] + mu[1:])
    z = 2.0 * mu_face * h
    a_face = _bernoulli(-z)   # multiplies the left node of the face
    b_face = _bernoulli(z)    # multiplies the right node of the face
    return a_face, b_face


def _apply_divergence(p: np.ndarray, a_face: np.ndarray, b_face: np.ndarray,
                      inv2h2: float) -> np.ndarray:
    """(A p)_i with zero-flux boundaries: dp/dt = -A p."""
    flux = (a_face * p[:-1] - b_face * p[1:]) * inv2h2
    out = np.zeros_like(p)
    out[:-1] += flux
    out[1:] -= flux
    return out


def fp_propagate(p0: np.ndarray, mu: np.ndarray, h: float, dt: float,
                 n_steps: int, theta: float = 1.0, rannacher: int = 0):
    """March the Fokker-Planck density n_steps of size dt.

    mu is (n,) for a time-homogeneous drift or (n_steps, n) for per-step
    drifts.  The first ``rannacher`` steps run fully implicit to damp
    non-smooth initial data before a theta < 1 march takes over.  Returns
    (p_final, max_mass_defect) where the defect is the worst per-step
    change of the conserved cell mass h * sum(p).
    """
    p = np.array(p0, dtype=np.float64, copy=True)
    n = p.size
    inv2h2 = 1.0 / (2.0 * h * h)
    time_dep = mu.ndim == 2
    max_defect = 0.0

    a_face = b_face = None
    theta_k = None
    ab = np.zeros((3, n))
    for k in range(n_steps):
        step_theta = 1.0 if k < rannacher else theta
        if time_dep or a_face is None or step_theta != theta_k:
            theta_k = step_theta
            mu_k = mu[k] if time_dep else mu
            a_face, b_face = _sg_coefficients(mu_k, h)
            c = theta_k * dt * inv2h2
            ab[:] = 0.0
            ab[0, 1:] = -c * b_face
            ab[2, :-1] = -c * a_face
            ab[1, :] = 1.0
            ab[1, :-1] += c * a_face
            ab[1, 1:] += c * b_face
        if theta_k < 1.0:
            rhs = p - (1.0 - theta_k) * dt * _apply_divergence(p, a_face, b_face, inv2h2)
        else:
            rhs = p
        mass_before = p.sum() * h
        p = solve_banded((1, 1), ab, rhs)
        defect = abs(p.sum() * h - mass_before)
        if defect > max_defect:
            max_defect = defect
    return p, max_defect


def euler_paths(x: np.ndarray, normals: np.ndarray, mu_nodes: np.ndarray,
                x_lo: float, h: float, dt: float) -> np.ndarray:
    """Euler steps dX = mu(X) dt + dW, drift linearly interpolated on its grid.

    x is advanced in place over normals.shape[0] steps; drift lookups clamp
    to the edge node values outside the grid.
    """
    nx = mu_nodes.shape[-1]
    nodes = x_lo + h * np.arange(nx)
    time_dep = mu_nodes.ndim == 2
    sq = np.sqrt(dt)
    for k in range(normals.shape[0]):
        mu_k = mu_nodes[k] if time_dep else mu_nodes
        x += np.interp(x, nodes, mu_k) * dt + sq * normals[k]
    return x
