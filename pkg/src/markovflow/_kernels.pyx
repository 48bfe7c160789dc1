# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: tridiagonal solve, Fokker-Planck marching, Euler paths.

Semantics mirror markovflow._kernels_py; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, fabs, sqrt

cnp.import_array()

BACKEND = "compiled"


cdef inline double _bernoulli(double z) noexcept nogil:
    if fabs(z) < 1e-5:
        return 1.0 - 0.5 * z + z * z / 12.0
    if z > 30.0:
        return z * exp(-z)
    return z / expm1(z)


cdef void _thomas(const double[::1] a, const double[::1] b, const double[::1] c,
                  const double[::1] d, double[::1] x,
                  double[::1] cp, double[::1] dp) noexcept nogil:
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i
    cdef double m
    cp[0] = c[0] / b[0]
    dp[0] = d[0] / b[0]
    for i in range(1, n - 1):
        m = b[i] - a[i - 1] * cp[i - 1]
        cp[i] = c[i] / m
        dp[i] = (d[i] - a[i - 1] * dp[i - 1]) / m
    m = b[n - 1] - a[n - 2] * cp[n - 2]
    dp[n - 1] = (d[n - 1] - a[n - 2] * dp[n - 2]) / m
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]


def thomas_solve(lower, diag, upper, rhs):
    """Solve the tridiagonal system (lower, diag, upper) x = rhs."""
    cdef cnp.ndarray[double, ndim=1] a = np.ascontiguousarray(lower, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] b = np.ascontiguousarray(diag, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] c = np.ascontiguousarray(upper, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] d = np.ascontiguousarray(rhs, dtype=np.float64)
    cdef Py_ssize_t n = b.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] cp = np.empty(n - 1)
    cdef cnp.ndarray[double, ndim=1] dp = np.empty(n)
    _thomas(a, b, c, d, out, cp, dp)
    return out


def fp_propagate(p0, mu, double h, double dt, Py_ssize_t n_steps, double theta=1.0,
                 Py_ssize_t rannacher=0):
    """March the Fokker-Planck density n_steps of size dt.

    Returns (p_final, max_mass_defect); see the NumPy twin for details.
    """
    cdef cnp.ndarray[double, ndim=1] p_arr = np.array(p0, dtype=np.float64)
    mu_in = np.asarray(mu, dtype=np.float64)
    cdef bint time_dep = mu_in.ndim == 2
    cdef cnp.ndarray[double, ndim=2] mu2d = np.ascontiguousarray(
        mu_in if time_dep else mu_in[None, :]
    )
    cdef Py_ssize_t n = p_arr.shape[0]
    cdef Py_ssize_t nf = n - 1

    cdef cnp.ndarray[double, ndim=1] af = np.empty(nf)
    cdef cnp.ndarray[double, ndim=1] bf = np.empty(nf)
    cdef cnp.ndarray[double, ndim=1] lo = np.empty(nf)
    cdef cnp.ndarray[double, ndim=1] di = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] up = np.empty(nf)
    cdef cnp.ndarray[double, ndim=1] rhs = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] pn = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] cp = np.empty(nf)
    cdef cnp.ndarray[double, ndim=1] dp = np.empty(n)

    cdef double[::1] p = p_arr
    cdef double[::1] afv = af, bfv = bf, lov = lo, div = di, upv = up
    cdef double[::1] rhsv = rhs, pnv = pn, cpv = cp, dpv = dp
    cdef double[:, ::1] muv = mu2d

    cdef double inv2h2 = 1.0 / (2.0 * h * h)
    cdef double max_defect = 0.0
    cdef double mass_before, defect, z, flux, cimp, cexp
    cdef double theta_k, theta_prev = -1.0
    cdef Py_ssize_t k, i, row

    with nogil:
        for k in range(n_steps):
            theta_k = 1.0 if k < rannacher else theta
            if time_dep or theta_k != theta_prev:
                theta_prev = theta_k
                cimp = theta_k * dt * inv2h2
                row = k if time_dep else 0
                for i in range(nf):
                    z = (muv[row, i] + muv[row, i + 1]) * h
                    afv[i] = _bernoulli(-z)
                    bfv[i] = _bernoulli(z)
                for i in range(n):
                    div[i] = 1.0
                for i in range(nf):
                    div[i] += cimp * afv[i]
                    div[i + 1] += cimp * bfv[i]
                    lov[i] = -cimp * afv[i]
                    upv[i] = -cimp * bfv[i]
            if theta_k < 1.0:
                cexp = (1.0 - theta_k) * dt * inv2h2
                for i in range(n):
                    rhsv[i] = p[i]
                for i in range(nf):
                    flux = cexp * (afv[i] * p[i] - bfv[i] * p[i + 1])
                    rhsv[i] -= flux
                    rhsv[i + 1] += flux
            else:
                for i in range(n):
                    rhsv[i] = p[i]
            mass_before = 0.0
            for i in range(n):
                mass_before += p[i]
            _thomas(lov, div, upv, rhsv, pnv, cpv, dpv)
            defect = -mass_before
            for i in range(n):
                defect += pnv[i]
                p[i] = pnv[i]
            defect = fabs(defect) * h
            if defect > max_defect:
                max_defect = defect

    return p_arr, max_defect


def euler_paths(x, normals, mu_nodes, double x_lo, double h, double dt):
    """Euler steps dX = mu(X) dt + dW; drift interpolated with edge clamping."""
    cdef cnp.ndarray[double, ndim=1] x_arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] z_arr = np.ascontiguousarray(normals, dtype=np.float64)
    mu_in = np.asarray(mu_nodes, dtype=np.float64)
    cdef bint time_dep = mu_in.ndim == 2
    cdef cnp.ndarray[double, ndim=2] mu2d = np.ascontiguousarray(
        mu_in if time_dep else mu_in[None, :]
    )
    cdef double[::1] xv = x_arr
    cdef double[:, ::1] zv = z_arr
    cdef double[:, ::1] muv = mu2d
    cdef Py_ssize_t n_steps = z_arr.shape[0]
    cdef Py_ssize_t n_paths = x_arr.shape[0]
    cdef Py_ssize_t nx = mu2d.shape[1]
    cdef double sq = sqrt(dt)
    cdef double pos, frac, m
    cdef Py_ssize_t k, j, i, row

    with nogil:
        for k in range(n_steps):
            row = k if time_dep else 0
            for j in range(n_paths):
                pos = (xv[j] - x_lo) / h
                if pos <= 0.0:
                    m = muv[row, 0]
                elif pos >= nx - 1:
                    m = muv[row, nx - 1]
                else:
                    i = <Py_ssize_t> pos
                    frac = pos - i
                    m = muv[row, i] * (1.0 - frac) + muv[row, i + 1] * frac
                xv[j] += m * dt + sq * zv[k, j]

    return x_arr
