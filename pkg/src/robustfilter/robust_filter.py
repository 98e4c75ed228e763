"""Grid filters: exact block recursion, truncated recursion, geometry and distances.

Measures live on uniform 1-D grids and are stored as log-weights, so that
truncated measures are exactly -inf off their compact and nothing underflows.
Each block k may carry its own grid; kernels map the grid of block k-1 to the
grid of block k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .likelihood import (
    BlockCoefficients,
    TransitionSpec,
    gaussian_log_density,
    psi_hat_eval,
)

LOG_UNDERFLOW = -700.0
TV_HILBERT_FACTOR = 2.0 / math.log(3.0)


class FilterError(RuntimeError):
    pass


def grid_spacing(grid: np.ndarray) -> float:
    return float(grid[1] - grid[0]) if grid.size > 1 else 1.0


@dataclass(frozen=True)
class GridMeasure:
    grid: np.ndarray
    logw: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        lw = np.asarray(self.logw, dtype=float)
        if g.ndim != 1 or lw.shape != g.shape:
            raise ValueError("grid and weights must be 1-D arrays of equal length")
        if g.size > 1 and not np.all(np.diff(g) > 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError("log-weights must be finite or -inf")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "logw", lw)

    @classmethod
    def from_weights(cls, grid, weights) -> "GridMeasure":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        with np.errstate(divide="ignore"):
            return cls(grid, np.log(w))

    @classmethod
    def gaussian(cls, grid, mean: float, std: float) -> "GridMeasure":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, gaussian_log_density(grid - mean, std * std)).normalized()

    @property
    def log_mass(self) -> float:
        return float(logsumexp(self.logw))

    @property
    def mass(self) -> float:
        return math.exp(self.log_mass)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.logw)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.logw - self.log_mass)

    def normalized(self) -> "GridMeasure":
        lm = self.log_mass
        if not np.isfinite(lm):
            raise FilterError("measure has zero mass")
        return GridMeasure(self.grid, self.logw - lm)

    def mass_outside(self, lo: float, hi: float) -> float:
        p = self.probabilities
        out = (self.grid < lo) | (self.grid > hi)
        return float(np.sum(p[out]))

    def mean(self) -> float:
        return float(np.sum(self.probabilities * self.grid))


def _check_same_grid(mu: GridMeasure, nu: GridMeasure):
    if mu.grid.shape != nu.grid.shape or not np.array_equal(mu.grid, nu.grid):
        raise ValueError("measures live on different grids")


def tv_distance(mu: GridMeasure, nu: GridMeasure) -> float:
    _check_same_grid(mu, nu)
    return 0.5 * float(np.sum(np.abs(mu.probabilities - nu.probabilities)))


def hilbert_distance(mu: GridMeasure, nu: GridMeasure) -> float:
    """log(max ratio / min ratio) over the common support; inf if supports differ."""
    _check_same_grid(mu, nu)
    a, b = np.isfinite(mu.logw), np.isfinite(nu.logw)
    if np.any(a != b):
        return math.inf
    if not np.any(a):
        return 0.0
    r = mu.logw[a] - nu.logw[a]
    return float(r.max() - r.min())


def distances(mu: GridMeasure, nu: GridMeasure) -> tuple[float, float]:
    return tv_distance(mu, nu), hilbert_distance(mu, nu)


# Kernels


def log_kernel(src: np.ndarray, dst: np.ndarray, coeffs: Optional[BlockCoefficients],
               spec: TransitionSpec, log_q: Optional[np.ndarray] = None) -> np.ndarray:
    """log[Q(x_i, y_j) psi_hat(x_i, y_j) dy] with the relative likelihood."""
    if log_q is None:
        log_q = transition_log_matrix(spec, src, dst)
    out = log_q + math.log(grid_spacing(dst))
    if coeffs is not None:
        out = out + psi_hat_eval(coeffs, src[:, None], dst[None, :])
    return out


def transition_log_matrix(spec: TransitionSpec, src, dst, substeps: int = 64) -> np.ndarray:
    """log Q between two grids.

    With zero drift this is the Gaussian kernel. With drift it is an Euler
    Markov-chain approximation: a short-step Gaussian kernel on a fine common
    grid, composed ``substeps`` times.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if spec.drift.is_zero:
        return gaussian_log_density(dst[None, :] - src[:, None], spec.tau)
    dt = spec.tau / substeps
    pad = 6.0 * math.sqrt(spec.tau) + spec.drift.M * spec.tau
    lo = min(src.min(), dst.min()) - pad
    hi = max(src.max(), dst.max()) + pad
    h = min(grid_spacing(src), grid_spacing(dst), math.sqrt(dt) / 4)
    fine = np.arange(lo, hi + h, h)
    mean = fine + spec.drift.f(fine) * dt
    step = np.exp(gaussian_log_density(fine[None, :] - mean[:, None], dt)) * h
    step /= step.sum(axis=1, keepdims=True)
    start = np.zeros((src.size, fine.size))
    idx = np.clip(np.searchsorted(fine, src), 1, fine.size - 1)
    frac = (src - fine[idx - 1]) / h
    start[np.arange(src.size), idx - 1] = 1 - frac
    start[np.arange(src.size), idx] = frac
    for _ in range(substeps):
        start = start @ step
    dens = np.array([np.interp(dst, fine, row) for row in start]) / h
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(dens, 0.0))


def _propagate(logw: np.ndarray, logk: np.ndarray) -> np.ndarray:
    return logsumexp(logw[:, None] + logk, axis=0)


def _finish(grid: np.ndarray, new: np.ndarray) -> GridMeasure:
    finite = new[np.isfinite(new)]
    if finite.size == 0 or finite.max() < LOG_UNDERFLOW:
        raise FilterError("total mass underflowed; use a larger grid or smaller step")
    return GridMeasure(grid, new).normalized()


def filter_step(pi: GridMeasure, coeffs: Optional[BlockCoefficients], spec: TransitionSpec,
                dst_grid: Optional[np.ndarray] = None, log_q: Optional[np.ndarray] = None) -> GridMeasure:
    """One block of the exact recursion on the grid."""
    dst = pi.grid if dst_grid is None else np.asarray(dst_grid, dtype=float)
    lk = log_kernel(pi.grid, dst, coeffs, spec, log_q)
    return _finish(dst, _propagate(pi.logw, lk))


def propagate_log_ratio(pi: GridMeasure, logk: np.ndarray, delta: np.ndarray, dst: np.ndarray):
    """Advance a filter and the log-ratio of a second filter against it.

    The second filter is pi * exp(delta). Returns the new filter and the new
    log-ratio, computed through log1p/expm1 so that tiny differences keep
    full relative precision.
    """
    joint = pi.logw[:, None] + logk
    col = logsumexp(joint, axis=0)
    new = _finish(dst, col)
    with np.errstate(invalid="ignore"):
        p = np.exp(joint - col[None, :])
    live = np.isfinite(col)
    p = np.where(live[None, :], p, 0.0)
    src = np.isfinite(pi.logw)
    raw = np.log1p(np.clip(expm1_safe(delta)[src] @ p[src], -1.0, None))
    raw = np.where(live, raw, 0.0)
    q = new.probabilities
    norm = math.log1p(float(np.sum(q * np.expm1(raw))))
    return new, np.where(live, raw - norm, 0.0)


def expm1_safe(delta: np.ndarray) -> np.ndarray:
    return np.expm1(np.where(np.isfinite(delta), delta, 0.0))


def ratio_distances(pi: GridMeasure, delta: np.ndarray) -> tuple[float, float]:
    """(TV, Hilbert) between pi * exp(delta) and pi."""
    p = pi.probabilities
    tv = 0.5 * float(np.sum(p * np.abs(np.expm1(delta))))
    live = np.isfinite(pi.logw)
    return tv, float(delta[live].max() - delta[live].min())


# Truncation geometry


@dataclass
class HypothesisReport:
    items: list = field(default_factory=list)

    def add(self, name: str, margin: float, strict: bool = True):
        self.items.append((name, bool(margin > 0 if strict else margin >= 0), float(margin)))

    @property
    def ok(self) -> bool:
        return all(flag for _, flag, _ in self.items)

    def failures(self) -> list:
        return [name for name, flag, _ in self.items if not flag]

    def render(self) -> str:
        return "\n".join(f"{'PASS' if f else 'FAIL'} {n} margin={m:.6g}" for n, f, m in self.items)


def p_entries(A2: float, B2: float, C1: float) -> tuple[float, float]:
    """(p11, p21) of the factor P with kappa = P^T diag(A2, B2) P."""
    r = 1.0 - C1 * C1 / (4.0 * A2 * B2)
    if r <= 0:
        raise ValueError("quadratic form is not negative definite")
    return math.sqrt(r), -C1 / (2.0 * B2)


def validate_hypotheses(h: float, tau: float, delta: float, iota: float, A2: float, B2: float,
                        C1: float, m0: float = 0.0, M: float = 0.0, C: float = 1.0,
                        p21: Optional[float] = None) -> HypothesisReport:
    """Margins of every standing inequality; positive means satisfied."""
    rep = HypothesisReport()
    theta = h * tau
    p11, p21_calc = p_entries(A2, B2, C1) if 4 * A2 * B2 > C1 * C1 else (0.0, -C1 / (2 * B2))
    p21 = p21_calc if p21 is None else p21
    rep.add("h >= 1", h - 1, strict=False)
    rep.add("tau > 1", tau - 1)
    rep.add("iota in (1/2, 1)", min(iota - 0.5, 1 - iota))
    rep.add("A2 >= h/4", A2 - h / 4, strict=False)
    rep.add("B2 >= h/4", B2 - h / 4, strict=False)
    rep.add("C1 <= h/8", h / 8 - C1, strict=False)
    rep.add("1/(1+p21) - 6 B2 p21 theta^(1-iota) > 0", 1 / (1 + p21) - 6 * B2 * p21 * theta ** (1 - iota))
    rep.add("p11 > 1/2", p11 - 0.5)
    rep.add("|p21| <= 1/2", 0.5 - abs(p21), strict=False)
    rep.add("theta^(1-iota) Delta > 3|m0| + 3 C M tau^2",
            theta ** (1 - iota) * delta - 3 * abs(m0) - 3 * C * M * tau ** 2)
    rep.add("d(Delta) > 0", delta / (1 + p21) - 6 * B2 * p21 * theta ** (1 - iota) * delta - 4 * M)
    return rep


@dataclass
class TruncationGeometry:
    delta: float
    iota: float
    h: float
    tau: float
    M: float
    A2: float
    B2: float
    C1: float
    sigma1sq: float
    sigma2sq: float
    m0: float
    centers: np.ndarray  # m_0, m_1, ..., m_n
    C: float = 1.0
    C1prime: float = 1.0
    p21_override: Optional[float] = None

    @property
    def theta(self) -> float:
        return self.h * self.tau

    @property
    def p11(self) -> float:
        return p_entries(self.A2, self.B2, self.C1)[0]

    @property
    def p21(self) -> float:
        if self.p21_override is not None:
            return self.p21_override
        return p_entries(self.A2, self.B2, self.C1)[1]

    @property
    def kappa(self) -> np.ndarray:
        return np.array([[self.A2, -self.C1 / 2], [-self.C1 / 2, self.B2]])

    @property
    def P(self) -> np.ndarray:
        return np.array([[self.p11, 0.0], [self.p21, 1.0]])

    @property
    def scale(self) -> float:
        """2 B2 (1 + p21)"""
        return 2.0 * self.B2 * (1.0 + self.p21)

    @property
    def halfwidth(self) -> float:
        return self.delta / self.scale

    @property
    def width(self) -> float:
        """Delta / (B2 (1 + p21)), the diameter of a compact."""
        return 2.0 * self.halfwidth

    @property
    def n_blocks(self) -> int:
        return len(self.centers) - 1

    def compact(self, k: int) -> tuple[float, float]:
        m = float(self.centers[k])
        return m - self.halfwidth, m + self.halfwidth

    def in_compact(self, k: int, x) -> np.ndarray:
        lo, hi = self.compact(k)
        x = np.asarray(x, dtype=float)
        return (x >= lo) & (x <= hi)

    def D(self, k: int) -> float:
        return abs(float(self.centers[k] - self.centers[k - 1]))

    def log_xi1(self, D: float) -> float:
        s = D + self.width
        return -0.5 * math.log(2 * math.pi * self.tau) - s * s / (2 * self.tau) - self.M * s - (
            self.tau / 2 + self.tau ** 2 / 2) * self.M

    def log_xi2(self, D: float) -> float:
        s = max(D - self.width, 0.0)
        return -0.5 * math.log(2 * math.pi * self.tau) - s * s / (2 * self.tau) + self.M * (
            D + self.width) + self.tau * self.M / 2

    def log_eps(self, D: float) -> float:
        return self.log_xi1(D) - self.log_xi2(D)

    def log_eps_prime(self, D: float) -> float:
        s = self.width + D
        B2, p = self.B2, self.p21
        return (-0.5 * B2 * p * p * s * s - B2 * self.delta * p * s - 2 * self.M * s
                - self.tau * (self.M + self.M ** 2 / 2))

    def eps(self, k: int) -> float:
        return math.exp(self.log_eps(self.D(k)))

    def eps_prime(self, k: int) -> float:
        return math.exp(self.log_eps_prime(self.D(k)))

    def tau_coeff(self, k: int) -> float:
        """1 - (eps'_k eps_{k-1})^2"""
        return -math.expm1(2 * (self.log_eps_prime(self.D(k)) + self.log_eps(self.D(k - 1))))

    def tau_of(self, t: float) -> float:
        return -math.expm1(2 * (self.log_eps_prime(t) + self.log_eps(t)))

    @property
    def d_delta(self) -> float:
        return self.delta / (1 + self.p21) - 6 * self.B2 * self.p21 * self.theta ** (1 - self.iota) * self.delta - 4 * self.M

    def log_T(self) -> float:
        """log T(Delta)"""
        th1 = self.theta ** (1 - self.iota) * self.delta
        C, tau, M = self.C, self.tau, self.M
        first = math.log(C * math.sqrt(tau) / th1) - 0.5 * (th1 / (6 * C * math.sqrt(2 * tau))) ** 2
        d = self.d_delta
        if d <= 0:
            return math.inf
        p11, p21 = self.p11, self.p21
        pref = (M * (1 + p21) / p11 + math.sqrt(self.A2)) * self.C1prime * math.sqrt(
            self.sigma1sq * self.sigma2sq) * p11 * self.B2 / d
        second = math.log(pref) + 63 * M * tau + 9 * tau * M / 2 + 640 * M * M - d * d / (4 * self.B2)
        return float(np.logaddexp(first, second))

    def dominant_exponent_rate(self) -> float:
        """Coefficient r with log T ~ -r Delta^2 from the second term."""
        c = 1 / (1 + self.p21) - 6 * self.B2 * self.p21 * self.theta ** (1 - self.iota)
        return c * c / (4 * self.B2)

    def alpha_tilde(self, L: float) -> float:
        C, tau = self.C, self.tau
        return 96 * C * math.sqrt(tau) / (L * math.sqrt(math.pi)) * math.exp(-0.5 * (L / (6 * C * math.sqrt(2 * tau))) ** 2)

    def rho(self, L: float) -> float:
        t = self.tau_of(L)
        a = self.alpha_tilde(L)
        return (t + math.sqrt(t * t + 4 * a * (1 - t))) / 2

    def log_one_minus_rho(self, L: float) -> float:
        """log(1 - rho), exact even when tau(L) rounds to 1.

        With u = 1 - tau, 1 - rho = 2 u (1 - a) / (1 + u + sqrt((1 - u)^2 + 4 u a)).
        """
        lu = 2 * (self.log_eps_prime(L) + self.log_eps(L))
        u = math.exp(lu)
        a = self.alpha_tilde(L)
        if a >= 1:
            return -math.inf
        return lu + math.log(2 * (1 - a)) - math.log(1 + u + math.sqrt((1 - u) ** 2 + 4 * u * a))

    def validate(self, C: Optional[float] = None) -> HypothesisReport:
        return validate_hypotheses(self.h, self.tau, self.delta, self.iota, self.A2, self.B2, self.C1,
                                   self.m0, self.M, self.C if C is None else C, self.p21_override)


def truncation_geometry(coeffs: Sequence[BlockCoefficients], delta: float, iota: float, m0: float,
                        M: float = 0.0, C: float = 1.0, C1prime: float = 1.0) -> TruncationGeometry:
    c0 = coeffs[0]
    p11, p21 = p_entries(c0.A2, c0.B2, c0.C1)
    scale = 2 * c0.B2 * (1 + p21)
    centers = np.array([m0] + [c.B1 / scale for c in coeffs])
    return TruncationGeometry(delta, iota, c0.h, c0.tau, M, c0.A2, c0.B2, c0.C1, c0.sigma1sq,
                              c0.sigma2sq, m0, centers, C, C1prime)


def block_grid(center: float, halfwidth: float, tau: float, size: int, padding: float = 4.0) -> np.ndarray:
    r = halfwidth + padding * math.sqrt(tau)
    return np.linspace(center - r, center + r, size)


def geometry_grids(geom: TruncationGeometry, size: int, padding: float = 4.0,
                   halfwidth: Optional[float] = None) -> list:
    hw = geom.halfwidth if halfwidth is None else halfwidth
    return [block_grid(float(m), hw, geom.tau, size, padding) for m in geom.centers]


def truncated_log_kernel(src: np.ndarray, dst: np.ndarray, geom: TruncationGeometry, k: int,
                         coeffs: BlockCoefficients, spec: TransitionSpec,
                         log_q: Optional[np.ndarray] = None) -> np.ndarray:
    """log of psi^Delta_k(x, x') [Q(x, x') if x in C_{k-1} else xi1(D_k)] dx'."""
    if log_q is None:
        log_q = transition_log_matrix(spec, src, dst)
    inside_src = geom.in_compact(k - 1, src)
    inside_dst = geom.in_compact(k, dst)
    if not inside_dst.any():
        raise FilterError(f"compact C_{k} does not meet the grid")
    base = np.where(inside_src[:, None], log_q, geom.log_xi1(geom.D(k)))
    lk = base + psi_hat_eval(coeffs, src[:, None], dst[None, :]) + math.log(grid_spacing(dst))
    return np.where(inside_dst[None, :], lk, -np.inf)


def truncated_step(pi: GridMeasure, geom: TruncationGeometry, k: int, coeffs: BlockCoefficients,
                   spec: TransitionSpec, dst_grid: Optional[np.ndarray] = None,
                   log_q: Optional[np.ndarray] = None) -> GridMeasure:
    dst = pi.grid if dst_grid is None else np.asarray(dst_grid, dtype=float)
    lk = truncated_log_kernel(pi.grid, dst, geom, k, coeffs, spec, log_q)
    return _finish(dst, _propagate(pi.logw, lk))


def escape_mass(run: Sequence[GridMeasure], geom: TruncationGeometry) -> np.ndarray:
    """pi_k(outside C_k) for k = 1..n, where run[k] is the filter after block k."""
    return np.array([run[k].mass_outside(*geom.compact(k)) for k in range(1, len(run))])
