"""Second-order structure of the Gaussian functionals (G1, G2, G3, G4).

Under the tilted measure the bridge noise B is an Ornstein-Uhlenbeck process
with rate theta = h tau, and for a deterministic g,

    int_0^1 g dB = int_0^1 T_g(s) dbeta_s,
    T_g(s) = g(s) - theta e^{theta s} int_s^1 e^{-theta u} g(u) du,

with beta a Brownian motion. Covariances are therefore L2 inner products of
transformed kernels. G1..G3 use g = 1, u, u^2; G4 uses the centred block
observation g(s) = y(tau s) - int_0^1 y(tau u) du.

The observation is treated as a right-continuous step path on the block grid
(value y_{i+1} on (s_i, s_{i+1}]), which makes left-point Stieltjes sums exact
integrals and keeps every route below consistent to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .path_sim import ObservationPath, block_unit_grid, stable_sinh_kernel

GRAM_CLIP = 1e-9

# 6-point Gauss-Legendre nodes on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(6)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class GramDegeneracyError(ArithmeticError):
    pass


def _phi0(a):
    """(1 - e^{-a}) / a, accurate for small a."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    small = np.abs(a) < 1e-8
    out[small] = 1.0 - a[small] / 2.0
    out[~small] = -np.expm1(-a[~small]) / a[~small]
    return out


def _phi1(a):
    """(1 - e^{-a}(1 + a)) / a^2, accurate for small a."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    small = np.abs(a) < 1e-3
    x = a[small]
    out[small] = 0.5 - x / 3.0 + x * x / 8.0 - x ** 3 / 30.0 + x ** 4 / 144.0
    x = a[~small]
    out[~small] = (-np.expm1(-x) - x * np.exp(-x)) / (x * x)
    return out


def _tail_integrals(g, s, theta, mode):
    """I_i = int_{s_i}^{t} e^{theta (s_i - u)} g(u) du by backward recursion."""
    hs = np.diff(s)
    a = theta * hs
    decay = np.exp(-a)
    if mode == "linear":
        e0 = hs * _phi0(a)
        e1 = hs * _phi1(a)
        piece = g[:-1] * e0 + (g[1:] - g[:-1]) * e1
    elif mode == "step":
        piece = g[1:] * hs * _phi0(a)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out = np.zeros_like(g, dtype=float)
    for i in range(len(g) - 2, -1, -1):
        out[i] = piece[i] + decay[i] * out[i + 1]
    return out


def ou_kernel_transform(g, s, theta: float, mode: str = "linear") -> np.ndarray:
    """Transform samples of g on the grid s (ending at t) into T_g on that grid.

    ``mode`` is how g is read between samples: "linear" interpolation, or
    "step" where g equals its right sample on each cell. In step mode the
    returned value at s_i uses the left limit of g.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    g = np.asarray(g, dtype=float)
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("g has non-finite samples")
    tail = _tail_integrals(g, s, theta, mode)
    if mode == "step":
        left = np.concatenate(([g[1] if len(g) > 1 else g[0]], g[1:]))
        left[0] = g[1]
        # at the last point the tail integral is empty
        out = left - theta * tail
        out[-1] = g[-1]
        return out
    return g - theta * tail


def kernel_one(theta, s, t=1.0):
    return np.exp(theta * (np.asarray(s, dtype=float) - t))


def kernel_linear(theta, s, t=1.0):
    s = np.asarray(s, dtype=float)
    return (t + 1.0 / theta) * np.exp(theta * (s - t)) - 1.0 / theta


def kernel_square(theta, s, t=1.0):
    s = np.asarray(s, dtype=float)
    return (t * t + 2 * t / theta + 2 / theta ** 2) * np.exp(theta * (s - t)) - (2 * s / theta + 2 / theta ** 2)


@dataclass(frozen=True)
class CovarianceTable:
    theta: float
    var1: float
    var2: float
    var3: float
    cov12: float
    cov13: float
    cov23: float

    def matrix(self) -> np.ndarray:
        """Covariance of (G1, G2, G3)."""
        return np.array(
            [
                [self.var1, self.cov12, self.cov13],
                [self.cov12, self.var2, self.cov23],
                [self.cov13, self.cov23, self.var3],
            ]
        )

    def matrix_gram_order(self) -> np.ndarray:
        """Covariance of (G1, G3, G2), the order of the Gram basis."""
        return self.matrix()[np.ix_([0, 2, 1], [0, 2, 1])]

    def entries(self) -> dict:
        return {k: getattr(self, k) for k in ("var1", "var2", "var3", "cov12", "cov13", "cov23")}


def covariance_table(theta: float) -> CovarianceTable:
    """Closed-form covariances of (G1, G2, G3)."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    t = float(theta)
    e1 = -np.expm1(-t)
    e2 = -np.expm1(-2 * t)
    q = 1 + 2 / t + 2 / t ** 2
    var1 = e2 / (2 * t)
    var2 = (1 + 1 / t) ** 2 * e2 / (2 * t) + 1 / t ** 2 - (2 / t ** 2 + 2 / t ** 3) * e1
    var3 = q ** 2 * e2 / (2 * t) + (2 / t + 2 / t ** 2) ** 3 * t / 6 - 8 / (6 * t ** 5) - 4 / t ** 2 * q
    cov12 = (1 / (2 * t) + 1 / (2 * t ** 2)) * e2 - e1 / t ** 2
    cov13 = (1 / (2 * t) + 1 / t ** 2 + 1 / t ** 3) * e2 - 2 / t ** 2
    cov23 = (1 + 1 / t) * (1 / (2 * t) + 1 / t ** 2 + 1 / t ** 3) * e2 - (1 / t ** 2 + 2 / t ** 3 + 2 / t ** 4) * e1 - 1 / t ** 2
    return CovarianceTable(t, var1, var2, var3, cov12, cov13, cov23)


def covariance_table_quadrature(theta: float) -> CovarianceTable:
    """Same table by adaptive quadrature of products of transformed kernels."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    ks = (kernel_one, kernel_linear, kernel_square)
    # boundary layer of width ~1/theta near s = 1
    brk = [max(0.0, 1.0 - 40.0 / theta), max(0.0, 1.0 - 5.0 / theta)]

    def ip(i, j):
        f = lambda u: float(ks[i](theta, u) * ks[j](theta, u))
        return quad(f, 0.0, 1.0, points=brk, epsabs=0.0, epsrel=1e-13, limit=400)[0]

    return CovarianceTable(theta, ip(0, 0), ip(1, 1), ip(2, 2), ip(0, 1), ip(0, 2), ip(1, 2))


@dataclass(frozen=True)
class ObservationCovariances:
    cov14: float
    cov24: float
    cov34: float
    var4: float
    cov14_stieltjes: float


def _centred_steps(y: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Samples of g = y - mean(y) under the step reading (g_0 unused)."""
    hs = np.diff(s)
    mean = float(np.sum(y[1:] * hs))
    return y - mean


def observation_covariances(block: ObservationPath, theta: float, h: float | None = None) -> ObservationCovariances:
    """Covariances of G4 with G1, G2, G3, and Var(G4), for one re-based block.

    Cov(G1, G4) is also returned through its Stieltjes form, which uses the
    stable sinh kernel; the other entries come from Gauss-Legendre quadrature
    of transformed-kernel products on every grid cell.
    """
    if h is not None and abs(h * block.tau - theta) > 1e-12 * theta:
        raise ValueError(f"theta = {theta} does not match h * tau = {h * block.tau}")
    if block.n_blocks != 1:
        raise ValueError("expected a single re-based block")
    s = block_unit_grid(block)
    y = block.y - block.y[0]
    g = _centred_steps(y, s)
    tail = _tail_integrals(g, s, theta, "step")

    # on cell (s_i, s_{i+1}], T_g(u) = e^{-theta (s_{i+1} - u)} a_{i+1}
    a = g[1:] - theta * tail[1:]
    hs = np.diff(s)
    u = s[:-1, None] + hs[:, None] * _GL_X[None, :]
    wts = hs[:, None] * _GL_W[None, :]
    f4 = np.exp(-theta * (s[1:, None] - u)) * a[:, None]
    f1 = kernel_one(theta, u)
    f2 = kernel_linear(theta, u)
    f3 = kernel_square(theta, u)
    cov14 = float(np.sum(wts * f1 * f4))
    cov24 = float(np.sum(wts * f2 * f4))
    cov34 = float(np.sum(wts * f3 * f4))
    var4 = float(np.sum(wts * f4 * f4))

    dy = np.diff(y)
    int_s = float(np.sum(s[:-1] * dy))
    sinh1 = float(stable_sinh_kernel(theta, 1.0))
    cov14_st = int_s * sinh1 - float(np.sum(stable_sinh_kernel(theta, s[:-1]) * dy))
    return ObservationCovariances(cov14, cov24, cov34, var4, cov14_st)


def printed_cov34(theta: float, cov14: float) -> float:
    """Cov(G3, G4) through the proportionality to Cov(G1, G4)."""
    return (1 + 2 / theta + 2 / theta ** 2) * cov14


def exp_weighted_mean(block: ObservationPath, theta: float) -> float:
    """int_0^1 g(u) e^{-theta u} du for the centred block (step reading)."""
    s = block_unit_grid(block)
    g = _centred_steps(block.y - block.y[0], s)
    hs = np.diff(s)
    return float(np.sum(g[1:] * np.exp(-theta * s[:-1]) * hs * _phi0(theta * hs)))


@dataclass(frozen=True)
class GramDecomposition:
    alpha: float
    beta: float
    gamma: float
    a: float
    b: float
    c: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0
    lambda4sq: float = 0.0
    has_observation: bool = False

    def lower_triangular(self) -> np.ndarray:
        """Map from (U1, U2, U3) to (G1, G3, G2)."""
        return np.array([[self.alpha, 0, 0], [self.beta, self.gamma, 0], [self.a, self.b, self.c]])


def _checked_sqrt(value: float, name: str, theta: float) -> float:
    if value < -GRAM_CLIP:
        raise GramDegeneracyError(f"{name} = {value:.3e} < 0 at theta = {theta}")
    return float(np.sqrt(max(value, 0.0)))


def gram_decompose(table: CovarianceTable, obs: ObservationCovariances | None = None) -> GramDecomposition:
    """Triangular decomposition in the order (G1, G3, G2, G4)."""
    th = table.theta
    if table.var1 <= 0:
        raise GramDegeneracyError(f"Var(G1) <= 0 at theta = {th}")
    alpha = float(np.sqrt(table.var1))
    beta = float(table.cov13 / alpha)
    gamma = _checked_sqrt(table.var3 - beta ** 2, "gamma^2", th)
    if gamma == 0.0:
        raise GramDegeneracyError(f"gamma = 0 at theta = {th}")
    a = float(table.cov12 / alpha)
    b = float((table.cov23 - a * beta) / gamma)
    c = _checked_sqrt(table.var2 - a * a - b * b, "c^2", th)
    if c == 0.0:
        raise GramDegeneracyError(f"c = 0 at theta = {th}")
    if obs is None:
        return GramDecomposition(alpha, beta, gamma, a, b, c)
    l1 = obs.cov14 / alpha
    l2 = (obs.cov34 - beta * l1) / gamma
    l3 = (obs.cov24 - a * l1 - b * l2) / c
    l4sq = obs.var4 - l1 * l1 - l2 * l2 - l3 * l3
    if l4sq < -GRAM_CLIP:
        raise GramDegeneracyError(f"lambda4^2 = {l4sq:.3e} < 0 at theta = {th}")
    return GramDecomposition(alpha, beta, gamma, a, b, c, l1, l2, l3, max(l4sq, 0.0), True)


def lambdas_from_covariances(gram: GramDecomposition, cov14: float, cov24: float, cov34: float):
    """lambda1..lambda3 for given G4 covariances, reusing the basis of ``gram``."""
    l1 = cov14 / gram.alpha
    l2 = (cov34 - gram.beta * l1) / gram.gamma
    l3 = (cov24 - gram.a * l1 - gram.b * l2) / gram.c
    return l1, l2, l3


# Leading terms of the large-theta expansions.
def series_expansions(theta: float) -> dict:
    """Large-theta expansions of the Gram entries and structure variances.

    ``sigma2sq_printed`` is an inverted variant of the sigma2^2 expansion kept
    for comparison; it does not track the exact value.
    """
    t = float(theta)
    r3 = np.sqrt(3.0)
    return {
        "alpha": 1 / np.sqrt(2 * t),
        "cov13": 1 / (2 * t) - 1 / t ** 2 + 1 / t ** 3,
        "beta": 1 / np.sqrt(2 * t) - np.sqrt(2) / t ** 1.5 + np.sqrt(2) / t ** 2.5,
        "beta2": 1 / (2 * t) - 2 / t ** 2 + 4 / t ** 3 - 4 / t ** 4,
        "var3": 1 / (2 * t) - 2 / (3 * t ** 2),
        "gamma": 2 / (t * r3) - r3 / t ** 2 + r3 / (4 * t ** 3) + 3 * r3 / (8 * t ** 4),
        "cov12": 1 / (2 * t) - 1 / (2 * t ** 2),
        "sigma1sq": 6 / t + 18 / t ** 2 + 18 / t ** 3 - 54 / t ** 4,
        "a": 1 / np.sqrt(2 * t) - 1 / (t ** 1.5 * np.sqrt(2)),
        "var2": 1 / (2 * t) - 3 / (2 * t ** 3),
        "b": r3 / (2 * t) - r3 / (4 * t ** 2) - 9 * r3 / (16 * t ** 3),
        "c2": 1 / (4 * t ** 2) - 5 / (4 * t ** 3),
        "sigma2sq": t ** 2 / 3 - t + 2,
        "sigma2sq_printed": 1 / (3 * t ** 2) - 1 / t + 2,
    }
