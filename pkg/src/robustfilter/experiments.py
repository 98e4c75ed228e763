"""Experiment drivers: stability of the filter in its initial condition, the
truncation sweep, contraction products, and a particle-filter cross-check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .fk_rep import u_chain_contraction
from .likelihood import BlockCoefficients, TransitionSpec, block_coefficients, theta_structure
from .path_sim import ObservationPath, blocks, make_rng, simulate_paths
from .robust_filter import (
    FilterError,
    GridMeasure,
    TruncationGeometry,
    escape_mass,
    filter_step,
    geometry_grids,
    log_kernel,
    propagate_log_ratio,
    ratio_distances,
    transition_log_matrix,
    truncated_log_kernel,
    truncated_step,
    truncation_geometry,
    tv_distance,
    validate_hypotheses,
)


@dataclass
class RunSetup:
    """One observation realization with everything the grid filters need."""

    cfg: ExperimentConfig
    seed: int
    path: ObservationPath
    coeffs: list
    geom: TruncationGeometry
    grids: list
    spec: TransitionSpec
    _logq: dict = field(default_factory=dict, repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.coeffs)

    def log_q(self, k: int) -> np.ndarray:
        """log Q from grid k-1 to grid k."""
        if k not in self._logq:
            self._logq[k] = transition_log_matrix(self.spec, self.grids[k - 1], self.grids[k])
        return self._logq[k]

    def prior(self, mean: Optional[float] = None, std: Optional[float] = None) -> GridMeasure:
        m = self.cfg.model
        return GridMeasure.gaussian(self.grids[0], m.prior_mean if mean is None else mean,
                                    m.prior_std if std is None else std)

    def geometry(self, delta: float) -> TruncationGeometry:
        m = self.cfg.model
        return truncation_geometry(self.coeffs, delta, self.cfg.iota, self.geom.m0, m.M, m.C, m.C1prime)


def prepare(cfg: ExperimentConfig, seed: int, n_blocks: Optional[int] = None,
            window_delta: Optional[float] = None, path: Optional[ObservationPath] = None) -> RunSetup:
    """Simulate (or take) a path, compute block coefficients and per-block grids.

    Grid k is centred on m_k and wide enough for the compact of ``window_delta``
    plus padding. The prior median serves as m_0.
    """
    m = cfg.model
    n = cfg.blocks if n_blocks is None else n_blocks
    if path is None:
        path = simulate_paths(m, n * m.tau, seed)
    coeffs = [block_coefficients(b, m.h, m.tau) for b in blocks(path)]
    geom = truncation_geometry(coeffs, cfg.delta, cfg.iota, m.prior_mean, m.M, m.C, m.C1prime)
    wd = cfg.delta if window_delta is None else window_delta
    grids = geometry_grids(geom, m.grid_size, m.padding, halfwidth=wd / geom.scale)
    spec = TransitionSpec.for_drift(m.drift, m.tau)
    return RunSetup(cfg, seed, path, coeffs, geom, grids, spec)


def exact_run(setup: RunSetup, prior: Optional[GridMeasure] = None) -> list:
    """[pi_0, pi_1, ..., pi_n] of the untruncated grid recursion."""
    pi = setup.prior() if prior is None else prior
    out = [pi]
    for k in range(1, setup.n_blocks + 1):
        pi = filter_step(pi, setup.coeffs[k - 1], setup.spec, setup.grids[k], setup.log_q(k))
        out.append(pi)
    return out


def truncated_run(setup: RunSetup, geom: TruncationGeometry, prior: Optional[GridMeasure] = None) -> list:
    pi = setup.prior() if prior is None else prior
    out = [pi]
    for k in range(1, setup.n_blocks + 1):
        pi = truncated_step(pi, geom, k, setup.coeffs[k - 1], setup.spec, setup.grids[k], setup.log_q(k))
        out.append(pi)
    return out


def fit_loglog_slope(t: np.ndarray, y: np.ndarray, burn_in: int = 10) -> float:
    """OLS slope of log y on log t, dropping the first ``burn_in`` points and zeros."""
    t = np.asarray(t, dtype=float)[burn_in:]
    y = np.asarray(y, dtype=float)[burn_in:]
    keep = y > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(t[keep]), np.log(y[keep]), 1)[0])


def linear_fit(x, y) -> tuple[float, float, float]:
    """(slope, intercept, R^2) of ordinary least squares."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


# Stability


def schedule_delta(n_blocks: int, nu: float) -> float:
    """Delta_n = sqrt(nu log n)."""
    return math.sqrt(nu * math.log(max(n_blocks, 2)))


def pair_distances(setup: RunSetup, alt: GridMeasure, trunc: Optional[TruncationGeometry] = None,
                   base: Optional[GridMeasure] = None) -> tuple[list, np.ndarray, np.ndarray]:
    """Run a filter and a second one from ``alt`` on the same observations.

    Returns the first filter's run and per-block TV and Hilbert distances
    (entry 0 is the prior pair). The second filter is carried as a log-ratio
    against the first so that tiny distances keep their relative precision.
    """
    pi = setup.prior() if base is None else base
    live = np.isfinite(pi.logw)
    if not np.array_equal(live, np.isfinite(alt.logw)):
        raise ValueError("priors are not comparable on the grid")
    delta = np.where(live, alt.normalized().logw - pi.logw, 0.0)
    run = [pi]
    d0 = ratio_distances(pi, delta)
    tv, hb = [d0[0]], [d0[1]]
    for k in range(1, setup.n_blocks + 1):
        if trunc is None:
            lk = log_kernel(pi.grid, setup.grids[k], setup.coeffs[k - 1], setup.spec, setup.log_q(k))
        else:
            lk = truncated_log_kernel(pi.grid, setup.grids[k], trunc, k, setup.coeffs[k - 1], setup.spec,
                                      setup.log_q(k))
        pi, delta = propagate_log_ratio(pi, lk, delta, setup.grids[k])
        run.append(pi)
        a, b = ratio_distances(pi, delta)
        tv.append(a)
        hb.append(b)
    return run, np.array(tv), np.array(hb)


@dataclass
class StabilityResult:
    rows: list  # (k, t, tv, hilbert, escape_mass, seed), exact pair
    trunc_rows: list  # same columns, truncated pair with Delta_n
    slopes: dict  # seed -> fitted slope (exact pair)
    trunc_slopes: dict
    delta_n: float

    def _matrix(self, rows, col):
        seeds = sorted({r[5] for r in rows})
        return np.array([[r[col] for r in rows if r[5] == s] for s in seeds])

    def tv_matrix(self) -> np.ndarray:
        """seeds x blocks (k = 1..n)"""
        return self._matrix(self.rows, 2)

    def hilbert_matrix(self) -> np.ndarray:
        return self._matrix(self.rows, 3)

    @property
    def median_slope(self) -> float:
        return float(np.nanmedian(list(self.slopes.values())))

    def hilbert_violations(self, prior_hilbert: dict) -> int:
        """Blocks where the Hilbert distance increased (prior pair included)."""
        bad = 0
        seeds = sorted(self.slopes)
        h = self.hilbert_matrix()
        for i, s in enumerate(seeds):
            seq = np.concatenate(([prior_hilbert[s]], h[i]))
            bad += int(np.sum(np.diff(seq) > 0))
        return bad


def run_stability(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> tuple[StabilityResult, dict]:
    """Exact and truncated filter pairs from two priors, per seed.

    Returns the result and the prior-pair Hilbert distance per seed.
    """
    seeds = cfg.seeds if seeds is None else seeds
    m = cfg.model
    dn = schedule_delta(cfg.blocks, cfg.nu)
    rows, trows, slopes, tslopes, h0 = [], [], {}, {}, {}
    for seed in seeds:
        setup = prepare(cfg, seed, window_delta=max(cfg.delta, dn))
        alt = setup.prior(cfg.alt_prior_mean, cfg.alt_prior_std)
        run, tv, hb = pair_distances(setup, alt)
        h0[seed] = float(hb[0])
        esc = escape_mass(run, setup.geom)
        t = np.arange(1, setup.n_blocks + 1) * m.tau
        for k in range(1, setup.n_blocks + 1):
            rows.append((k, float(t[k - 1]), float(tv[k]), float(hb[k]), float(esc[k - 1]), seed))
        slopes[seed] = fit_loglog_slope(t, tv[1:], cfg.burn_in)

        geom_n = setup.geometry(dn)
        trun, ttv, thb = pair_distances(setup, alt, trunc=geom_n)
        tesc = escape_mass(run, geom_n)
        for k in range(1, setup.n_blocks + 1):
            trows.append((k, float(t[k - 1]), float(ttv[k]), float(thb[k]), float(tesc[k - 1]), seed))
        tslopes[seed] = fit_loglog_slope(t, ttv[1:], cfg.burn_in)
    return StabilityResult(rows, trows, slopes, tslopes, dn), h0


# Truncation sweep


@dataclass
class SweepResult:
    deltas: np.ndarray
    sup_mean_tv: np.ndarray
    mean_escape: np.ndarray
    log_T: np.ndarray
    slope: float
    intercept: float
    r2: float
    escape_rows: dict  # delta -> rows (k, t, tv, hilbert, escape_mass, seed)
    hypothesis_failures: dict  # delta -> failing inequality names
    underflow: list  # (delta, seed) pairs where the truncated recursion underflowed
    h: float

    @property
    def x(self) -> np.ndarray:
        return self.deltas ** 2 / self.h


def sweep_hypothesis_failures(cfg: ExperimentConfig) -> dict:
    """Delta -> names of failing standing inequalities, for failing sweep values only."""
    m = cfg.model
    st = theta_structure(m.h, m.tau)
    out = {}
    for d in cfg.delta_sweep:
        rep = validate_hypotheses(m.h, m.tau, d, cfg.iota, st.A2, st.B2, st.C1, m.prior_mean, m.M, m.C)
        if not rep.ok:
            out[float(d)] = rep.failures()
    return out


def run_truncation_sweep(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> SweepResult:
    """Exact and truncated recursions on shared observations for each Delta.

    All runs of one seed share the grids of the largest Delta. The regression
    is log(sup over blocks of the seed-mean TV) against Delta^2 / h.
    """
    seeds = cfg.seeds if seeds is None else seeds
    deltas = np.array(cfg.delta_sweep, dtype=float)
    if deltas.size < 4:
        raise ValueError("a sweep needs at least four Delta values")
    m = cfg.model
    tv = np.zeros((deltas.size, len(seeds), cfg.blocks))
    esc = np.zeros_like(tv)
    esc_rows = {float(d): [] for d in deltas}
    fails, underflow, log_t = {}, [], []
    for j, seed in enumerate(seeds):
        setup = prepare(cfg, seed, window_delta=float(deltas.max()))
        run = exact_run(setup)
        t = np.arange(1, setup.n_blocks + 1) * m.tau
        for i, d in enumerate(deltas):
            geom = setup.geometry(float(d))
            if j == 0:
                fails[float(d)] = geom.validate().failures()
                log_t.append(geom.log_T())
            e = escape_mass(run, geom)
            esc[i, j] = e
            try:
                trun = truncated_run(setup, geom)
            except FilterError:
                underflow.append((float(d), seed))
                tv[i, j] = 1.0
                continue
            for k in range(1, setup.n_blocks + 1):
                tv[i, j, k - 1] = tv_distance(run[k], trun[k])
                esc_rows[float(d)].append((k, float(t[k - 1]), float(tv[i, j, k - 1]), math.inf,
                                           float(e[k - 1]), seed))
    sup = tv.mean(axis=1).max(axis=1)
    x = deltas ** 2 / m.h
    with np.errstate(divide="ignore"):
        ly = np.log(sup)
    ok = np.isfinite(ly)
    if ok.sum() >= 2:
        slope, icpt, r2 = linear_fit(x[ok], ly[ok])
    else:
        slope, icpt, r2 = float("nan"), float("nan"), float("nan")
    return SweepResult(deltas, sup, esc.mean(axis=(1, 2)), np.array(log_t), slope, icpt, r2, esc_rows,
                       fails, underflow, m.h)


# Contraction products


@dataclass
class ContractionStudy:
    deficits: np.ndarray  # per seed: 1 - prod tau_{2k+2} ... tau_{2n}
    bound_deficit: float  # 1 - (1 - eps(L)^2 eps'(L)^2 / 2)^(n-k-2)
    L: float
    rho: float
    tau_L: float
    alpha_tilde: float
    coverage: float  # share of bootstrap resamples whose mean product respects the bound

    @property
    def mean_product_ok(self) -> bool:
        return float(self.deficits.mean()) >= self.bound_deficit


def run_contraction(cfg: ExperimentConfig, seeds: Sequence[int], gap: int = 12, k: int = 0,
                    resamples: int = 1000, boot_seed: int = 0) -> ContractionStudy:
    """Empirical E[tau_{2n} tau_{2n-2} ... tau_{2k+2}] with n - k = gap, over seeds.

    Products are compared through their deficits 1 - prod, which keep precision
    when every factor is within rounding of 1.
    """
    n = k + gap
    deficits = []
    ledger = None
    for seed in seeds:
        setup = prepare(cfg, seed, n_blocks=2 * n)
        ledger = u_chain_contraction(setup.geom, cfg.L if cfg.L > 0 else None)
        deficits.append(ledger.product_deficit(range(2 * k + 2, 2 * n + 1, 2)))
    deficits = np.array(deficits)
    bound = ledger.bound_deficit(n - k - 2)
    rng = np.random.default_rng(boot_seed)
    idx = rng.integers(0, deficits.size, size=(resamples, deficits.size))
    coverage = float(np.mean(deficits[idx].mean(axis=1) >= bound))
    return ContractionStudy(deficits, bound, ledger.L, ledger.rho, ledger.tau_L, ledger.alpha_tilde, coverage)


# Particle filter


def particle_filter(path: ObservationPath, cfg: ExperimentConfig, n_particles: int, seed: int) -> list:
    """Bootstrap particle filter on the raw observation increments.

    Particles move by Euler steps on the path's time grid and are weighted by
    exp(sum h X dY - h^2 X^2 dt / 2) over each block, then resampled
    systematically. Returns the particle cloud at the end of every block.
    """
    m = cfg.model
    drift = m.drift
    rng = make_rng(seed, 0, 7)
    x = m.sample_prior(rng, n_particles)
    dt = path.dt
    sq = math.sqrt(dt)
    dy = np.diff(path.y)
    out = []
    for k in range(path.n_blocks):
        rng = make_rng(seed, k + 1, 7)
        logw = np.zeros(n_particles)
        for i in range(path.steps_per_block):
            j = k * path.steps_per_block + i
            logw += m.h * x * dy[j] - 0.5 * m.h * m.h * x * x * dt
            step = rng.standard_normal(n_particles) * sq
            if drift.is_zero:
                x = x + step
            else:
                x = x + drift.f(x) * dt + step
        w = np.exp(logw - logw.max())
        w /= w.sum()
        pos = (rng.random() + np.arange(n_particles)) / n_particles
        idx = np.minimum(np.searchsorted(np.cumsum(w), pos), n_particles - 1)
        x = x[idx]
        out.append(x.copy())
    return out


def binned_tv(measure: GridMeasure, particles: np.ndarray, coarsen: int = 1) -> float:
    """TV between a grid measure and a particle cloud on merged grid cells.

    Cells are centred on grid points; ``coarsen`` consecutive cells are merged
    so that sampling noise in the histogram stays small. Particles outside the
    grid fall into the end cells.
    """
    g = measure.grid
    edges = np.concatenate(([-np.inf], 0.5 * (g[1:] + g[:-1]), [np.inf]))
    counts = np.histogram(particles, bins=edges)[0].astype(float)
    p = measure.probabilities
    nb = math.ceil(g.size / coarsen)
    pad = nb * coarsen - g.size
    cp = np.concatenate((counts, np.zeros(pad))).reshape(nb, coarsen).sum(axis=1)
    pp = np.concatenate((p, np.zeros(pad))).reshape(nb, coarsen).sum(axis=1)
    return 0.5 * float(np.sum(np.abs(pp - cp / cp.sum())))


def grid_vs_particles(cfg: ExperimentConfig, seed: int, n_particles: Optional[int] = None,
                      coarsen: int = 1) -> tuple[float, list]:
    """Final-block binned TV between the grid filter and a particle filter."""
    setup = prepare(cfg, seed)
    run = exact_run(setup)
    clouds = particle_filter(setup.path, cfg, cfg.particles if n_particles is None else n_particles, seed)
    tvs = [binned_tv(run[k + 1], clouds[k], coarsen) for k in range(len(clouds))]
    return tvs[-1], tvs


def coefficient_rows(coeffs: Sequence[BlockCoefficients]) -> list:
    rows = []
    for k, c in enumerate(coeffs, 1):
        o, g = c.obs, c.gram
        rows.append((k, c.theta, o.cov14, o.cov24, o.cov34, o.var4, g.lambda1, g.lambda2, g.lambda3, g.lambda4sq))
    return rows
