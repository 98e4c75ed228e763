"""Pair-space Feynman-Kac machinery for the truncated filter, by brute force.

Pair states (x1, x2) live on grid x grid and are flattened as i1 * n + i2.
The two-step kernel R~_k moves (x1, x2) to (z1, z2): z1 is reached from x2 by
the truncated transition without its likelihood, z2 from z1 by Q weighted
with the truncated likelihood of block k. Chaining the even two-step kernels
and weighting by the odd likelihoods reproduces the truncated filter; the
backward-normalized kernels S and the staggered chain U make that explicit.

All matrices here are dense; a guard keeps grids at 25 points or fewer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .likelihood import BlockCoefficients, TransitionSpec, psi_hat_eval
from .robust_filter import (
    TruncationGeometry,
    grid_spacing,
    transition_log_matrix,
    truncated_log_kernel,
)

MAX_GRID = 25


class GridTooLarge(ValueError):
    pass


def _exp_scaled(logm: np.ndarray) -> np.ndarray:
    """exp of a log-matrix after removing its largest finite entry."""
    finite = logm[np.isfinite(logm)]
    shift = finite.max() if finite.size else 0.0
    return np.exp(logm - shift)


@dataclass
class PairModel:
    """Truncated filter ingredients on one small common grid."""

    grid: np.ndarray
    geom: TruncationGeometry
    coeffs: Sequence[BlockCoefficients]
    spec: TransitionSpec
    _logq: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.size > MAX_GRID:
            raise GridTooLarge(f"pair-space checks allow at most {MAX_GRID} grid points, got {self.grid.size}")
        if len(self.coeffs) > self.geom.n_blocks:
            raise ValueError("geometry does not cover every block")

    @property
    def n(self) -> int:
        return self.grid.size

    @property
    def dx(self) -> float:
        return grid_spacing(self.grid)

    @property
    def log_q(self) -> np.ndarray:
        if self._logq is None:
            self._logq = transition_log_matrix(self.spec, self.grid, self.grid)
        return self._logq

    def q(self) -> np.ndarray:
        """Q(x_i, x_j) dx"""
        return np.exp(self.log_q) * self.dx

    def q_markov(self) -> np.ndarray:
        """Q dx renormalized over the grid, a Markov matrix."""
        m = self.q()
        return m / m.sum(axis=1, keepdims=True)

    def psi(self, k: int) -> np.ndarray:
        """Truncated likelihood psi^Delta_k(x_i, x_j), up to a block constant."""
        lp = psi_hat_eval(self.coeffs[k - 1], self.grid[:, None], self.grid[None, :])
        lp = np.where(self.geom.in_compact(k, self.grid)[None, :], lp, -np.inf)
        return _exp_scaled(lp)

    def source(self, k: int) -> np.ndarray:
        """Q(x_i, x_j) dx if x_i in C_{k-1}, else xi1(D_k) dx."""
        inside = self.geom.in_compact(k - 1, self.grid)
        xi1 = math.exp(self.geom.log_xi1(self.geom.D(k))) * self.dx
        return np.where(inside[:, None], self.q(), xi1)

    def one_step(self, k: int) -> np.ndarray:
        """Truncated one-block kernel K_k = psi^Delta_k * source_k."""
        lk = truncated_log_kernel(self.grid, self.grid, self.geom, k, self.coeffs[k - 1], self.spec, self.log_q)
        return _exp_scaled(lk)


def direct_truncated(model: PairModel, mu: np.ndarray, n_blocks: int) -> np.ndarray:
    """Probability vector of the truncated filter after n_blocks, by plain recursion."""
    v = np.asarray(mu, dtype=float) / np.sum(mu)
    for k in range(1, n_blocks + 1):
        v = v @ model.one_step(k)
        v /= v.sum()
    return v


def two_step_kernel(model: PairModel, k: int, markov_last: bool = False) -> np.ndarray:
    """R~_k as an (n^2, n^2) matrix over flattened pair states.

    With ``markov_last`` the likelihood of block k is replaced by 1 and Q by
    its grid-normalized version, so that the second coordinate integrates out.
    """
    if k < 2:
        raise ValueError("two-step kernels start at k = 2")
    n = model.n
    first = model.source(k - 1) * model.geom.in_compact(k - 1, model.grid)[None, :]  # (x2, z1)
    if markov_last:
        second = model.q_markov()
    else:
        second = model.psi(k) * model.q()  # (z1, z2)
    block = first[:, :, None] * second[None, :, :]  # (x2, z1, z2)
    # rows do not depend on x1
    r = np.broadcast_to(block.reshape(n, n * n)[None, :, :], (n, n, n * n))
    return np.ascontiguousarray(r.reshape(n * n, n * n))


def mixing_measure(model: PairModel, k: int) -> np.ndarray:
    """lambda_k(z1, z2) = 1_{C_{k-1}}(z1) 1_{C_k}(z2) psi_k(z1, z2), flattened.

    Uses Q dx as the reference so that it compares entrywise with R~_k.
    """
    ind = model.geom.in_compact(k - 1, model.grid)[:, None]
    return (ind * model.psi(k) * model.q()).reshape(-1)


def mixing_sandwich_check(model: PairModel, k: int, slack: float = 1e-12) -> tuple[bool, float]:
    """xi1(D_{k-1}) lambda_k <= R~_k(x, .) <= xi2(D_{k-1}) lambda_k for every row x.

    Returns (holds, worst relative violation). Both sides carry the same dx^2
    and the same likelihood scaling.
    """
    r = two_step_kernel(model, k)
    lam = mixing_measure(model, k) * model.dx
    d = model.geom.D(k - 1)
    lo = math.exp(model.geom.log_xi1(d)) * lam
    hi = math.exp(model.geom.log_xi2(d)) * lam
    scale = max(float(hi.max()), 1e-300)
    viol = max(float(np.max(lo[None, :] - r)), float(np.max(r - hi[None, :])), 0.0) / scale
    return viol <= slack, viol


def backward_potentials(kernels: Sequence[np.ndarray]) -> list:
    """psi_{2n|2k} for k = 0..n given kernels [R~_2, R~_4, ..., R~_2n]."""
    m = kernels[0].shape[0]
    pots = [np.ones(m)]
    for r in reversed(kernels):
        pots.append(r @ pots[-1])
    return pots[::-1]


def s_kernels(kernels: Sequence[np.ndarray], pots: Sequence[np.ndarray]) -> list:
    """S_{2n|2k}(x, x') = psi_{2n|2k+2}(x') R~_{2k+2}(x, x') / psi_{2n|2k}(x)."""
    out = []
    for k, r in enumerate(kernels):
        den = pots[k]
        if np.any(den <= 0):
            raise ZeroDivisionError(f"zero potential psi_(2n|{2 * k}) at a reachable state")
        out.append(r * pots[k + 1][None, :] / den[:, None])
    return out


def dobrushin(p: np.ndarray, rows: Optional[np.ndarray] = None) -> float:
    """max over pairs of rows of their total-variation distance."""
    m = p if rows is None else p[rows]
    m = np.unique(m, axis=0) if m.shape[0] > 1 else m
    best = 0.0
    for i in range(m.shape[0]):
        best = max(best, float(0.5 * np.max(np.sum(np.abs(m - m[i]), axis=1))))
    return best


@dataclass
class FKChain:
    """Everything needed to evaluate the U-chain representation for n blocks."""

    model: PairModel
    n_blocks: int
    kernels: list
    pots: list
    S: list

    @property
    def pairs(self) -> int:
        return len(self.kernels)

    @property
    def terminal_markov(self) -> bool:
        return self.n_blocks % 2 == 1


def build_chain(model: PairModel, n_blocks: int) -> FKChain:
    """Two-step kernels for blocks 2, 4, ...; the odd case ends with a Markov step."""
    if n_blocks < 1:
        raise ValueError("need at least one block")
    pairs = (n_blocks + 1) // 2
    ks = []
    for j in range(pairs):
        k = 2 * j + 2
        ks.append(two_step_kernel(model, k, markov_last=(k > n_blocks)))
    pots = backward_potentials(ks)
    return FKChain(model, n_blocks, ks, pots, s_kernels(ks, pots))


def _u_kernel(chain: FKChain, j: int) -> np.ndarray:
    """U_{2j-1} = (a, b) -> U_{2j+1} = (c, d), for j = 1..pairs-1, on flattened states."""
    n = chain.model.n
    s_prev = chain.S[j - 1].reshape(n, n, n, n)[0]  # (a, b, c): rows do not depend on first coord
    cond = s_prev / np.maximum(s_prev.sum(axis=2, keepdims=True), 1e-300)
    nxt = chain.S[j].reshape(n, n, n, n)[0].sum(axis=2)  # (c, d)
    # U(a, b; c, d) = cond(a, b, c) * nxt(c, d)
    u = cond[:, :, :, None] * nxt[None, None, :, :]
    return u.reshape(n * n, n * n)


def u_chain_law(chain: FKChain, mu: np.ndarray) -> np.ndarray:
    """Law of the terminal state under the Feynman-Kac U-chain, as a probability vector.

    Initial law of Z_0 = (0, x0) is psi_{2n|0}(0, .) * mu, normalized.
    """
    n = chain.model.n
    g = chain.model
    mu = np.asarray(mu, dtype=float)
    z0 = chain.pots[0].reshape(n, n)[0] * mu
    z0 = z0 / z0.sum()
    s0 = chain.S[0].reshape(n, n, n, n)[0]  # (z, z', x)
    u = (z0[:, None] * s0.sum(axis=2)).reshape(-1)  # law of U_1 = (z, z')
    for j in range(chain.pairs):
        pot = g.psi(2 * j + 1).reshape(-1)
        u = u * pot
        u = u / u.sum()
        if j < chain.pairs - 1:
            u = u @ _u_kernel(chain, j + 1)
    if chain.terminal_markov:
        # the last U state is (X_{n-1}, X_n); the filter is its second coordinate
        return u.reshape(n, n).sum(axis=0)
    last = chain.S[-1].reshape(n, n, n, n)[0]
    cond = last / np.maximum(last.sum(axis=2, keepdims=True), 1e-300)
    # terminal step: U_{2n+1}^(1) = Z_{2n}^(2) drawn from S_{2n|2n-2}((., a), (b, .)) given b
    term = np.einsum("ab,abc->c", u.reshape(n, n), cond)
    return term / term.sum()


def representation_check(model: PairModel, mu: np.ndarray, n_blocks: int) -> float:
    """max |U-chain Feynman-Kac law - truncated filter| after n_blocks."""
    chain = build_chain(model, n_blocks)
    lhs = u_chain_law(chain, mu)
    rhs = direct_truncated(model, mu, n_blocks)
    return float(np.max(np.abs(lhs - rhs)))


def s_dobrushin_report(chain: FKChain) -> list:
    """(k, numerical Dobrushin of S_{2n|2k}, bound 1 - eps_{2k+1}^2) per kernel."""
    geom = chain.model.geom
    out = []
    for k, s in enumerate(chain.S):
        bound = -math.expm1(2 * geom.log_eps(geom.D(2 * k + 1)))
        out.append((k, dobrushin(s), bound))
    return out


def u_dobrushin_report(chain: FKChain) -> list:
    """(j, numerical Dobrushin of the U kernel into U_{2j+1}, bound 1 - eps_{2j-1}^2 eps'_{2j}^2).

    Rows are restricted to reachable states: first coordinate in C_{2j-2},
    second in C_{2j-1}.
    """
    g = chain.model
    geom = g.geom
    n = g.n
    out = []
    for j in range(1, chain.pairs):
        u = _u_kernel(chain, j)
        a_ok = geom.in_compact(2 * j - 2, g.grid) if j > 1 else np.ones(n, bool)
        b_ok = geom.in_compact(2 * j - 1, g.grid)
        rows = np.flatnonzero((a_ok[:, None] & b_ok[None, :]).reshape(-1))
        bound = -math.expm1(2 * (geom.log_eps(geom.D(2 * j - 1)) + geom.log_eps_prime(geom.D(2 * j))))
        out.append((j, dobrushin(u, rows), bound))
    return out


def fk_transform_gap(psi_vec: np.ndarray, eta: np.ndarray, eta2: np.ndarray) -> tuple[float, float]:
    """(||Psi.eta - Psi.eta'||, 2 min(1, ||Psi|| / <eta, Psi> ||eta - eta'||))."""
    def bg(e):
        w = psi_vec * e
        return w / w.sum()

    lhs = 0.5 * float(np.sum(np.abs(bg(eta) - bg(eta2))))
    tv = 0.5 * float(np.sum(np.abs(eta - eta2)))
    rhs = 2 * min(1.0, float(psi_vec.max()) / float(np.sum(eta * psi_vec)) * tv)
    return lhs, rhs


def separation_bound_check(t2: float, x: float, z: float, D: float, delta: float, B2: float, p21: float) -> bool:
    """Two-sided bound on exp(-(t2 - 2 B2 (p21 x + z))^2 / (4 B2)) from the centre offset."""
    if abs(x - z) > D * (1 + 1e-12) + 1e-15:
        raise ValueError("precondition |x - z| <= D violated")
    a = t2 - 2 * B2 * (p21 + 1) * z
    if abs(a) > delta * (1 + 1e-12) + 1e-15:
        raise ValueError("precondition |2 B2 (p21 + 1) z - t2| <= Delta violated")
    mid = -(t2 - 2 * B2 * (p21 * x + z)) ** 2 / (4 * B2)
    base = -a * a / (4 * B2)
    lo = base - B2 * p21 * p21 * D * D - abs(p21) * D * delta
    hi = base + abs(p21) * D * delta
    tol = 1e-12 * max(1.0, abs(base))
    return bool(lo <= mid + tol and mid <= hi + tol)


# Contraction ledger


def smallest_L(geom: TruncationGeometry, C: Optional[float] = None) -> float:
    """Smallest L with L >= 3 m0 + 3 C M tau^2 and alpha~(L) <= 1/4."""
    C = geom.C if C is None else C
    floor = 3 * abs(geom.m0) + 3 * C * geom.M * geom.tau ** 2
    lo = max(floor, 1e-9)
    if geom.alpha_tilde(lo) <= 0.25:
        return lo
    hi = 2 * lo + 6 * C * math.sqrt(2 * geom.tau)
    while geom.alpha_tilde(hi) > 0.25:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if geom.alpha_tilde(mid) > 0.25 else (lo, mid)
    return hi


@dataclass
class ContractionLedger:
    log_eps: np.ndarray  # index k = 1..n (entry 0 unused)
    log_eps_prime: np.ndarray
    log_one_minus_tau: np.ndarray  # log (eps'_k eps_{k-1})^2 for k >= 2
    L: float
    alpha_tilde: float
    tau_L: float
    rho: float
    log_one_minus_tau_L: float
    log_one_minus_rho: float

    def product_deficit(self, ks: Sequence[int]) -> float:
        """1 - prod_{k in ks} tau_k, accurate when every tau_k is close to 1."""
        s = float(sum(math.log1p(-math.exp(self.log_one_minus_tau[k])) for k in ks))
        return -math.expm1(s)

    def bound_deficit(self, power: int) -> float:
        """1 - (1 - eps(L)^2 eps'(L)^2 / 2)^power; zero for power <= 0."""
        if power <= 0:
            return 0.0
        return -math.expm1(power * math.log1p(-0.5 * math.exp(self.log_one_minus_tau_L)))


def u_chain_contraction(geom: TruncationGeometry, L: Optional[float] = None) -> ContractionLedger:
    n = geom.n_blocks
    if L is None or L <= 0:
        L = smallest_L(geom)
    le = np.full(n + 1, np.nan)
    lep = np.full(n + 1, np.nan)
    for k in range(1, n + 1):
        le[k] = geom.log_eps(geom.D(k))
        lep[k] = geom.log_eps_prime(geom.D(k))
    lomt = np.full(n + 1, np.nan)
    lomt[2:] = 2 * (lep[2:] + le[1:-1])
    ll = 2 * (geom.log_eps(L) + geom.log_eps_prime(L))
    return ContractionLedger(le, lep, lomt, L, geom.alpha_tilde(L), geom.tau_of(L), geom.rho(L), ll,
                             geom.log_one_minus_rho(L))
