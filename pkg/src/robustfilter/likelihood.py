"""Closed-form block likelihood, its quadratic coefficients, and Monte Carlo oracles.

For one observation block and pinned endpoints (x, z), the drift-free block
likelihood is

    psi_hat(x, z) = E[ exp( int h X dY - 1/2 int (h X)^2 ds ) ]

over Brownian bridges X from x to z on [0, tau]. Its logarithm is a
quadratic polynomial in (x, z); the coefficients depend on theta = h tau and on
the block through a handful of Stieltjes integrals and the lambda system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .ou_gaussian import (
    GramDecomposition,
    ObservationCovariances,
    covariance_table,
    gram_decompose,
    lambdas_from_covariances,
    observation_covariances,
)
from .path_sim import (
    DriftSpec,
    ObservationPath,
    block_unit_grid,
    make_rng,
    standard_bridges,
)


@dataclass(frozen=True)
class Affine:
    """const + cx * x + cz * z"""

    const: float
    cx: float
    cz: float

    def __call__(self, x, z):
        return self.const + self.cx * x + self.cz * z


@dataclass(frozen=True)
class ThetaStructure:
    """Everything in the likelihood that depends only on (h, tau)."""

    h: float
    tau: float
    theta: float
    gram: GramDecomposition
    sigma1sq: float
    sigma2sq: float
    px: float
    pz: float
    qx: float
    qz: float
    A2: float
    B2: float
    C1: float


def _sigmas(theta, g):
    s1 = 1.0 / (2.0 * (-(theta ** 2 / 3 + theta / 2) * g.alpha ** 2 + theta ** 2 * g.alpha * g.beta / 2 + 0.5))
    s2 = 1.0 / (2.0 * (-s1 * theta ** 4 * g.alpha ** 2 * g.gamma ** 2 / 8 + 0.5))
    if not (s1 > 0 and s2 > 0 and math.isfinite(s1) and math.isfinite(s2)):
        raise ArithmeticError(f"sigma^2 not positive at theta = {theta}: {s1}, {s2}")
    return s1, s2


@lru_cache(maxsize=64)
def theta_structure(h: float, tau: float) -> ThetaStructure:
    theta = h * tau
    g = gram_decompose(covariance_table(theta))
    s1, s2 = _sigmas(theta, g)
    al, be, ga, a, b, c = g.alpha, g.beta, g.gamma, g.a, g.b, g.c
    mix = theta ** 2 * al * ga / 2 * s1
    px = -al / 3 - be / 2 + a
    pz = -al / 6 + be / 2
    qx = b - ga / 2 - mix * px
    qz = ga / 2 - mix * pz
    ht3 = h * theta ** 3
    A2 = h * theta / 6 - s1 / 2 * ht3 * px ** 2 - s2 / 2 * ht3 * qx ** 2 - 0.5 * ht3 * c ** 2
    B2 = h * theta / 6 - s1 / 2 * ht3 * pz ** 2 - s2 / 2 * ht3 * qz ** 2
    C1 = -h * theta / 6 + s1 * ht3 * px * pz + s2 * ht3 * qx * qz
    return ThetaStructure(h, tau, theta, g, s1, s2, px, pz, qx, qz, A2, B2, C1)


@dataclass(frozen=True)
class BlockCoefficients:
    theta: float
    h: float
    tau: float
    sigma1sq: float
    sigma2sq: float
    m1: Affine
    m2: Affine
    A2: float
    B2: float
    C1: float
    A1: float
    B1: float
    C0: Optional[float]
    gram: Optional[GramDecomposition] = None
    obs: Optional[ObservationCovariances] = None
    int_one_minus_s: float = 0.0
    int_s: float = 0.0

    @property
    def log_prefactor(self) -> float:
        return 0.5 * math.log(self.sigma1sq * self.sigma2sq)

    @property
    def has_constant(self) -> bool:
        return self.C0 is not None


def block_integrals(block: ObservationPath) -> tuple[float, float]:
    """(int (1 - s) dY, int s dY) over the re-based block, left-point sums."""
    s = block_unit_grid(block)
    dy = np.diff(block.y)
    return float(np.sum((1.0 - s[:-1]) * dy)), float(np.sum(s[:-1] * dy))


def block_coefficients(block: ObservationPath, h: float, tau: float) -> BlockCoefficients:
    """Quadratic-form coefficients of log psi_hat for one re-based block."""
    if abs(block.tau - tau) > 1e-12 * tau:
        raise ValueError(f"block length {block.tau} does not match tau = {tau}")
    st = theta_structure(float(h), float(tau))
    obs = observation_covariances(block, st.theta, h)
    g = gram_decompose(covariance_table(st.theta), obs)
    i1, i_s = block_integrals(block)
    return _assemble(st, g, obs, i1, i_s)


def _assemble(st: ThetaStructure, g: GramDecomposition, obs, i1: float, i_s: float) -> BlockCoefficients:
    h, th = st.h, st.theta
    s1, s2 = st.sigma1sq, st.sigma2sq
    r = h * math.sqrt(st.tau)
    k = h * h * st.tau ** 1.5
    mix = th ** 2 * g.alpha * g.gamma / 2 * s1
    l1, l2, l3 = g.lambda1, g.lambda2, g.lambda3

    A1 = (
        h * i1
        + s1 * h * th ** 2 * (g.alpha / 3 + g.beta / 2 - g.a) * l1
        + s2 * h * th ** 2 * st.qx * (-l2 + mix * l1)
        - h * th ** 2 * l3 * g.c
    )
    B1 = -s1 * h * th ** 2 * st.pz * l1 + h * i_s + s2 * h * th ** 2 * st.qz * (-l2 + mix * l1)
    m1c = -s1 * r * l1
    m2c = s2 * (-r * l2 - th ** 2 * g.alpha * g.gamma / 2 * m1c)
    C0 = None
    if g.has_observation:
        C0 = m1c ** 2 / (2 * s1) + m2c ** 2 / (2 * s2) + 0.5 * r * r * l3 ** 2 + 0.5 * r * r * g.lambda4sq - th / 2
    m1 = Affine(m1c, s1 * k * st.px, s1 * k * st.pz)
    m2 = Affine(m2c, s2 * k * st.qx, s2 * k * st.qz)
    return BlockCoefficients(
        th, h, st.tau, s1, s2, m1, m2, st.A2, st.B2, st.C1, A1, B1, C0, g, obs, i1, i_s
    )


def synthetic_coefficients(h: float, tau: float, cov14: float, cov24: float, cov34: float,
                           var4: Optional[float], i1: float, i_s: float) -> BlockCoefficients:
    """Coefficients from given G4 covariances and Stieltjes integrals."""
    st = theta_structure(float(h), float(tau))
    obs = ObservationCovariances(cov14, cov24, cov34, 0.0 if var4 is None else var4, cov14)
    if var4 is None:
        g = gram_decompose(covariance_table(st.theta))
        l1, l2, l3 = lambdas_from_covariances(g, cov14, cov24, cov34)
        g = GramDecomposition(g.alpha, g.beta, g.gamma, g.a, g.b, g.c, l1, l2, l3, 0.0, False)
    else:
        g = gram_decompose(covariance_table(st.theta), obs)
    return _assemble(st, g, obs, i1, i_s)


def psi_hat_eval(coeffs: BlockCoefficients, x, z, absolute: bool = False):
    """log psi_hat at (x, z). The relative value omits every (x, z)-free term."""
    val = -coeffs.A2 * x * x - coeffs.B2 * z * z + coeffs.A1 * x + coeffs.B1 * z + coeffs.C1 * x * z
    if absolute:
        if coeffs.C0 is None:
            raise ValueError("absolute log psi_hat needs lambda4^2, which these coefficients lack")
        val = val + coeffs.log_prefactor + coeffs.C0
    return val


def psi_hat_direct(coeffs: BlockCoefficients, x, z):
    """Absolute log psi_hat assembled term by term from the Gaussian integrals.

    Independent of the coefficient extraction used by ``psi_hat_eval``.
    """
    g = coeffs.gram
    if g is None or not g.has_observation:
        raise ValueError("direct assembly needs the full Gram decomposition")
    h, tau, th = coeffs.h, coeffs.tau, coeffs.theta
    s1, s2 = coeffs.sigma1sq, coeffs.sigma2sq
    k = h * h * tau ** 1.5
    r = h * math.sqrt(tau)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    pre = h * (x * coeffs.int_one_minus_s + z * coeffs.int_s) - h * h * tau / 2 * (x * x / 3 + x * z / 3 + z * z / 3)
    m1 = s1 * (-k * (x / 3 + z / 6) * g.alpha + k * x * g.a + k / 2 * (z - x) * g.beta - r * g.lambda1)
    m2 = s2 * (k * x * g.b + k / 2 * (z - x) * g.gamma - r * g.lambda2 - th ** 2 * g.alpha * g.gamma / 2 * m1)
    rest = (
        0.5 * np.log(s1 * s2)
        + m1 ** 2 / (2 * s1)
        + m2 ** 2 / (2 * s2)
        + 0.5 * (-k * g.c * x + r * g.lambda3) ** 2
        + 0.5 * r * r * g.lambda4sq
        - th / 2
    )
    return pre + rest


# Monte Carlo


@dataclass
class BridgeStatistics:
    """Per-bridge sufficient statistics of sqrt(tau)-free unit bridges xi.

    For bridges X = x (1 - s) + z s + sqrt(tau) xi, everything the block
    likelihood needs is linear in these arrays.
    """

    dy_proj: np.ndarray  # (n, n_blocks): sum_i xi_i dY_i
    lin1: np.ndarray  # sum_i xi_i (1 - s_i)
    lins: np.ndarray  # sum_i xi_i s_i
    sq: np.ndarray  # sum over cells of (xi_i^2 + xi_i xi_{i+1} + xi_{i+1}^2) / 3

    @property
    def n(self) -> int:
        return len(self.sq)


def bridge_statistics(blocks: Sequence[ObservationPath], n: int, seed: int, chunk: int = 4096) -> BridgeStatistics:
    steps = blocks[0].steps_per_block
    if any(b.steps_per_block != steps for b in blocks):
        raise ValueError("blocks must share one grid")
    s = np.linspace(0.0, 1.0, steps + 1)[:-1]
    dys = np.stack([np.diff(b.y) for b in blocks], axis=1)
    parts = []
    done, j = 0, 0
    while done < n:
        m = min(chunk, n - done)
        full = standard_bridges(m, steps, make_rng(seed, 0, j))
        xi = full[:, :-1]
        sq = (2.0 * np.einsum("ij,ij->i", xi, xi) + np.einsum("ij,ij->i", xi, full[:, 1:])) / 3.0
        parts.append((xi @ dys, xi @ (1.0 - s), xi @ s, sq))
        done += m
        j += 1
    return BridgeStatistics(*(np.concatenate(p) for p in zip(*parts)))


def _log_mean_and_se(logw: np.ndarray) -> tuple[float, float]:
    if not np.any(np.isfinite(logw)):
        raise FloatingPointError("all Monte Carlo log-weights are -inf (overflow guard)")
    n = logw.size
    lm = float(logsumexp(logw) - math.log(n))
    rel = np.exp(logw - lm)
    se = float(np.std(rel, ddof=1) / math.sqrt(n))
    return lm, se


def psi_hat_mc_from_stats(stats: BridgeStatistics, block_index: int, block: ObservationPath,
                          h: float, x: float, z: float) -> tuple[float, float]:
    """(log estimate, s.e. of the log estimate) of psi_hat from shared bridges."""
    tau, dt = block.tau, block.dt
    s = block_unit_grid(block)
    dy = np.diff(block.y)
    lin = x * (1 - s) + z * s
    rt = math.sqrt(tau)
    # int X^2 ds uses its mean given the grid values, which adds tau dt / 6
    quad_det = tau * (x * x + x * z + z * z) / 3 + tau * dt / 6
    det = h * float(np.sum(lin[:-1] * dy)) - 0.5 * h * h * quad_det
    logw = (
        det
        + h * rt * stats.dy_proj[:, block_index]
        - 0.5 * h * h * dt * (2 * rt * (x * stats.lin1 + z * stats.lins) + tau * stats.sq)
    )
    return _log_mean_and_se(logw)


def psi_hat_mc_oracle(block: ObservationPath, x: float, z: float, n: int, seed: int,
                      h: float = 1.0) -> tuple[float, float]:
    """Bridge Monte Carlo estimate of log psi_hat(x, z) with its delta-method s.e."""
    if n < 1000:
        raise ValueError("need at least 1000 bridges")
    stats = bridge_statistics([block], n, seed)
    return psi_hat_mc_from_stats(stats, 0, block, h, x, z)


# Transition density


@dataclass(frozen=True)
class TransitionSpec:
    drift: DriftSpec
    tau: float
    mode: str = "exact-gaussian"
    n_bridges: int = 4000
    n_steps: int = 256

    def __post_init__(self):
        if self.mode not in ("exact-gaussian", "mc-bridge"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "exact-gaussian" and not self.drift.is_zero:
            raise ValueError("exact Gaussian transition needs zero drift")

    @classmethod
    def for_drift(cls, drift: DriftSpec, tau: float, **kw) -> "TransitionSpec":
        return cls(drift, tau, "exact-gaussian" if drift.is_zero else "mc-bridge", **kw)


def gaussian_log_density(d, tau: float):
    d = np.asarray(d, dtype=float)
    return -0.5 * d * d / tau - 0.5 * math.log(2 * math.pi * tau)


def transition_log_bounds(d, tau: float, M: float):
    """Log of the lower and upper bounds on Q for a displacement d."""
    base = gaussian_log_density(d, tau)
    ad = np.abs(d)
    return base - M * ad - tau * (M / 2 + M * M / 2), base + M * ad + tau * M / 2


def transition_density(spec: TransitionSpec, x: float, y, seed: int = 0):
    """Q(x, y) and its standard error; y may be an array (common random numbers)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    base = np.exp(gaussian_log_density(y - x, spec.tau))
    if spec.mode == "exact-gaussian":
        return base, np.zeros_like(base)
    f = spec.drift
    xi = standard_bridges(spec.n_bridges, spec.n_steps, make_rng(seed, 0, 0))[:, :-1]
    s = np.linspace(0.0, 1.0, spec.n_steps + 1)[:-1]
    ds = spec.tau / spec.n_steps
    rt = math.sqrt(spec.tau)
    vals = np.empty_like(y)
    ses = np.empty_like(y)
    for j, yj in enumerate(y):
        X = x + (yj - x) * s + rt * xi
        integ = np.sum(f.fprime(X) + f.f(X) ** 2, axis=1) * ds
        w = np.exp(float(f.primitive(yj) - f.primitive(x)) - 0.5 * integ)
        vals[j] = base[j] * w.mean()
        ses[j] = base[j] * w.std(ddof=1) / math.sqrt(w.size)
    return vals, ses


def log_transition_matrix(spec: TransitionSpec, src, dst, seed: int = 0) -> np.ndarray:
    """log Q(src_i, dst_j) as a matrix."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if spec.mode == "exact-gaussian":
        return gaussian_log_density(dst[None, :] - src[:, None], spec.tau)
    out = np.empty((src.size, dst.size))
    for i, x in enumerate(src):
        v, _ = transition_density(spec, float(x), dst, seed)
        out[i] = np.log(v)
    return out


# Block likelihood with drift


@dataclass(frozen=True)
class PsiEstimate:
    log_value: float
    se: float
    log_psi_hat: float
    inside_sandwich: bool


def psi_log_bounds(log_psi_hat, x, z, tau: float, M: float):
    width = 2 * M * np.abs(np.asarray(z) - np.asarray(x)) + tau * (M + M * M / 2)
    return log_psi_hat - width, log_psi_hat + width


def psi_estimate(block: ObservationPath, x: float, z: float, spec: TransitionSpec, n: int,
                 seed: int, h: float = 1.0, coeffs: Optional[BlockCoefficients] = None) -> PsiEstimate:
    """Block likelihood psi(x, z) with drift, as a ratio of bridge expectations."""
    if n < 1000:
        raise ValueError("need at least 1000 bridges")
    if coeffs is None:
        coeffs = block_coefficients(block, h, block.tau)
    lph = float(psi_hat_eval(coeffs, x, z, absolute=True))
    M = spec.drift.amplitude if not spec.drift.is_zero else 0.0
    if M == 0.0:
        return PsiEstimate(lph, 0.0, lph, True)
    f = spec.drift
    steps = block.steps_per_block
    s = block_unit_grid(block)
    dy = np.diff(block.y)
    dt, tau = block.dt, block.tau
    rt = math.sqrt(tau)
    num, den = [], []
    chunk = 2048
    done, j = 0, 0
    while done < n:
        m = min(chunk, n - done)
        X = x * (1 - s) + z * s + rt * standard_bridges(m, steps, make_rng(seed, 0, j))
        L, R = X[:, :-1], X[:, 1:]
        G = -0.5 * np.sum(f.fprime(L) + f.f(L) ** 2, axis=1) * dt
        sq = np.sum(L * L + L * R + R * R, axis=1) / 3.0 + tau / 6.0
        Lk = h * (L @ dy) - 0.5 * h * h * dt * sq
        num.append(G + Lk)
        den.append(G)
        done += m
        j += 1
    ln = np.concatenate(num)
    ld = np.concatenate(den)
    shift_n, shift_d = ln.max(), ld.max()
    wn, wd = np.exp(ln - shift_n), np.exp(ld - shift_d)
    mn, md = wn.mean(), wd.mean()
    log_val = float(math.log(mn) + shift_n - math.log(md) - shift_d)
    # delta method for a ratio of means, on the log scale
    cov = np.cov(np.stack([wn / mn, wd / md]), ddof=1)
    se = float(math.sqrt(max(cov[0, 0] + cov[1, 1] - 2 * cov[0, 1], 0.0) / wn.size))
    lo, hi = psi_log_bounds(lph, x, z, tau, M)
    inside = bool(lo - 3 * se <= log_val <= hi + 3 * se)
    return PsiEstimate(log_val, se, lph, inside)
