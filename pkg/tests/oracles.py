"""Independent reference implementations used to check the package.

Everything here is deliberately written from first principles (bisection,
finite differences, Gaussian moment identities, brute-force quadrature)
and never calls the code paths it is used to verify.
"""

from __future__ import annotations

import math

import numpy as np


def bisect_root(f, lo: float, hi: float, width: float = 1e-14) -> float:
    """Plain bisection down to the requested bracket width."""
    flo, fhi = f(lo), f(hi)
    assert flo * fhi < 0.0, "no sign change on the bracket"
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if f(mid) * flo > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def central_diff(f, x: float, h: float = 1e-5) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def rel_err(approx: float, exact: float, floor: float = 1e-10) -> float:
    return abs(approx - exact) / max(abs(exact), floor)


def gaussian_expect_quadratic(
    psi1: np.ndarray, psi2sq: np.ndarray, mean: np.ndarray, cov: np.ndarray, y: float
) -> float:
    """E[psi1'a/(1+y) - a' psi2sq a / (2(1+y)^2)] for a ~ N(mean, cov)."""
    s = 1.0 + y
    lin = float(psi1 @ mean) / s
    quad = (float(mean @ psi2sq @ mean) + float(np.trace(psi2sq @ cov))) / (2.0 * s * s)
    return lin - quad


def gaussian_entropy(cov: np.ndarray) -> float:
    d = cov.shape[0]
    return 0.5 * (d * math.log(2.0 * math.pi * math.e) + float(np.linalg.slogdet(cov)[1]))


def gaussian_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    d = len(mean)
    diff = np.asarray(x, dtype=float) - mean
    quad = float(diff @ np.linalg.solve(cov, diff))
    norm = math.sqrt((2.0 * math.pi) ** d * float(np.linalg.det(cov)))
    return math.exp(-0.5 * quad) / norm


def simulate_gbm(mu: float, sigma: float, s0: float, dt: float, n: int, rng) -> np.ndarray:
    """Exact GBM sampling: S_{k+1} = S_k exp((mu - sigma^2/2) dt + sigma dW)."""
    z = rng.standard_normal(n)
    incr = (mu - 0.5 * sigma**2) * dt + sigma * math.sqrt(dt) * z
    return s0 * np.exp(np.concatenate([[0.0], np.cumsum(incr)]))


def running_sup_injection(z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """A_t = (z0 - v0)^+ v sup_{s<=t}(Z_s - V_s), computed naively."""
    n = len(z)
    a = np.empty(n)
    a[0] = max(z[0] - v[0], 0.0)
    for i in range(1, n):
        a[i] = max(a[i - 1], z[i] - v[i])
    return a


# Reference model: d = 1, mu = 0.2, sigma = 1, sigma_z = 0.2, kappa = 0.5,
# eta = 1, rho = gamma = 0.2.  Frozen values below were produced with the
# bisection/arithmetic oracles in this file (see scripts in test modules).
REF = {
    "lambda": 0.910753193579918,
    "u0": -0.09799230686117888,
    "u1": -8.302639428110326e-05,
    "denorm_x1_z2": -0.003127744929931356,
    "theta0": 0.19105444204090413,
    "xi_star": 0.3624246577445103,
    "psi1_star": 0.37320508075688774,
    "psi2_star": 1.0,
    "psi3_star": -0.09248493154890206,
    "agg_drift": 0.07464101615137755,
    "agg_diff": 0.39955101820841044,
    "mu_hat": -0.005179491924311219,
}
