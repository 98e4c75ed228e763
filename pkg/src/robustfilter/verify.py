"""Self-check suites. Each returns a table and an overall pass flag."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ExperimentConfig, with_model
from .fk_rep import (
    PairModel,
    build_chain,
    mixing_sandwich_check,
    representation_check,
    s_dobrushin_report,
    u_dobrushin_report,
)
from .likelihood import (
    TransitionSpec,
    block_coefficients,
    bridge_statistics,
    psi_hat_eval,
    psi_hat_mc_from_stats,
    psi_estimate,
    theta_structure,
    transition_density,
    transition_log_bounds,
)
from .ou_gaussian import covariance_table, covariance_table_quadrature, gram_decompose
from .path_sim import DriftSpec, blocks, make_rng, simulate_paths
from .robust_filter import GridMeasure, distances, filter_step, validate_hypotheses
from .experiments import prepare

THETAS = (0.5, 1.0, 2.0, 5.0, 10.0, 100.0)
COV_RTOL = 1e-8
GRAM_ATOL = 1e-10
PSI_Z = 3.0
TRANSITION_Z = 2.576  # two-sided 99%
REPRESENTATION_TOL = 1e-9
SANDWICH_SLACK = 1e-12
DOBRUSHIN_SLACK = 1e-10
TV_HILBERT = 2.0 / math.log(3.0)


@dataclass
class SuiteResult:
    name: str
    header: list
    rows: list
    ok: bool
    extra: dict = field(default_factory=dict)  # file stem -> (header, rows)


def suite_covariances(cfg: ExperimentConfig, seed: int) -> SuiteResult:
    rows, ok = [], True
    for th in THETAS:
        closed = covariance_table(th)
        quad = covariance_table_quadrature(th)
        for name, c in closed.entries().items():
            q = quad.entries()[name]
            rel = abs(c - q) / abs(q)
            good = rel <= COV_RTOL
            ok &= good
            rows.append((th, name, c, q, rel, good))
        g = gram_decompose(closed)
        L = np.array([[g.alpha, 0, 0], [g.beta, g.gamma, 0], [g.a, g.b, g.c]])
        err = float(np.max(np.abs(L @ L.T - closed.matrix_gram_order())))
        good = err <= GRAM_ATOL
        ok &= good
        rows.append((th, "gram", float("nan"), float("nan"), err, good))
    return SuiteResult("covariances", ["theta", "entry", "closed", "quadrature", "error", "pass"], rows, ok)


def psi_triples(cfg: ExperimentConfig, seed: int, n_triples: int = 10):
    """(blocks, triples) with each triple (block index, x, z) near the simulated signal."""
    m = cfg.model
    n_blocks = max(n_triples, 1)
    path = simulate_paths(m, n_blocks * m.tau, seed)
    bl = blocks(path)
    ends = path.signal_at_block_ends()
    rng = make_rng(seed, 0, 3)
    out = []
    for k in range(n_triples):
        x = float(ends[k] + 0.5 * rng.standard_normal())
        z = float(ends[k + 1] + 0.5 * rng.standard_normal())
        out.append((k, x, z))
    return bl, out


def suite_psi(cfg: ExperimentConfig, seed: int, n_triples: int = 10) -> SuiteResult:
    """Closed-form log psi_hat against the bridge Monte Carlo oracle."""
    m = cfg.model
    bl, triples = psi_triples(cfg, seed, n_triples)
    spec = TransitionSpec.for_drift(m.drift, m.tau)
    drift = not m.drift.is_zero
    stats = None if drift else bridge_statistics(bl, m.mc_bridges, seed)
    rows, ok = [], True
    for k, x, z in triples:
        c = block_coefficients(bl[k], m.h, m.tau)
        closed = float(psi_hat_eval(c, x, z, absolute=True))
        if drift:
            est = psi_estimate(bl[k], x, z, spec, m.mc_bridges, seed + 1 + k, m.h, c)
            mc, se, good = est.log_value, est.se, est.inside_sandwich
        else:
            mc, se = psi_hat_mc_from_stats(stats, k, bl[k], m.h, x, z)
            good = abs(closed - mc) <= PSI_Z * se
        ok &= bool(good)
        rows.append((k, x, z, closed, mc, se, bool(good)))
    return SuiteResult("psi", ["block", "x", "z", "logpsi_closed", "logpsi_mc", "se", "inside_sandwich"], rows, ok)


def suite_transition(cfg: ExperimentConfig, seed: int, n_points: int = 20) -> SuiteResult:
    """Bridge Monte Carlo transition density inside its Gaussian sandwich."""
    m = cfg.model
    drift = m.drift if not m.drift.is_zero else DriftSpec("scaled-tanh", 0.3)
    tau = m.tau
    spec = TransitionSpec(drift, tau, "mc-bridge", n_bridges=20_000, n_steps=256)
    x = 0.0
    ys = np.linspace(-4 * math.sqrt(tau), 4 * math.sqrt(tau), n_points)
    val, se = transition_density(spec, x, ys, seed)
    lo, hi = transition_log_bounds(ys - x, tau, drift.M)
    rows, ok = [], True
    for y, v, s, a, b in zip(ys, val, se, lo, hi):
        good = bool(math.exp(a) - TRANSITION_Z * s <= v <= math.exp(b) + TRANSITION_Z * s)
        ok &= good
        rows.append((x, float(y), float(v), float(s), float(a), float(b), good))
    return SuiteResult("transition", ["x", "y", "q_mc", "se", "log_lower", "log_upper", "pass"], rows, ok)


def _pair_model(cfg: ExperimentConfig, seed: int, grid_size: int, n_blocks: int) -> PairModel:
    setup = prepare(cfg, seed, n_blocks=n_blocks)
    geom = setup.geom
    lo = float(min(geom.centers) - geom.halfwidth - 0.5)
    hi = float(max(geom.centers) + geom.halfwidth + 0.5)
    return PairModel(np.linspace(lo, hi, grid_size), geom, setup.coeffs, setup.spec)


def suite_representation(cfg: ExperimentConfig, seed: int, grids=(9, 25), n_seeds: int = 3) -> SuiteResult:
    rows, ok = [], True
    for s in range(seed, seed + n_seeds):
        for ng in grids:
            model = _pair_model(cfg, s, ng, 4)
            mu = np.exp(cfg.model.prior_logpdf(model.grid))
            for n in (1, 2, 3, 4):
                d = representation_check(model, mu, n)
                good = d <= REPRESENTATION_TOL
                ok &= good
                rows.append((n, ng, s, d, good))
    return SuiteResult("representation", ["n", "grid", "seed", "max_diff", "pass"], rows, ok)


def suite_mixing(cfg: ExperimentConfig, seed: int, grid: int = 25, n_seeds: int = 5) -> SuiteResult:
    """Mixing sandwich of the two-step kernels, plus Dobrushin coefficients against their bounds."""
    rows, dob, ok = [], [], True
    for s in range(seed, seed + n_seeds):
        model = _pair_model(cfg, s, grid, 5)
        for k in (2, 3, 4, 5):
            good, viol = mixing_sandwich_check(model, k, SANDWICH_SLACK)
            ok &= good
            rows.append((k, grid, s, viol, good))
        chain = build_chain(model, 4)
        for kind, rep in (("S", s_dobrushin_report(chain)), ("U", u_dobrushin_report(chain))):
            for j, coef, bound in rep:
                good = coef <= bound + DOBRUSHIN_SLACK
                ok &= good
                dob.append((kind, j, grid, s, coef, bound, good))
    extra = {"dobrushin": (["kernel", "index", "grid", "seed", "coefficient", "bound", "pass"], dob)}
    return SuiteResult("mixing", ["n", "grid", "seed", "max_diff", "pass"], rows, ok, extra)


def suite_hypotheses(cfg: ExperimentConfig, seed: int) -> SuiteResult:
    m = cfg.model
    st = theta_structure(m.h, m.tau)
    rep = validate_hypotheses(m.h, m.tau, cfg.delta, cfg.iota, st.A2, st.B2, st.C1, m.prior_mean, m.M, m.C)
    rows = [(name, margin, flag) for name, flag, margin in rep.items]
    return SuiteResult("hypotheses", ["inequality", "margin", "pass"], rows, rep.ok)


def random_comparable_pair(rng: np.random.Generator, size: int):
    grid = np.linspace(-5, 5, size)
    a = rng.gamma(1.0, size=size) + 1e-3
    b = a * np.exp(rng.normal(0, rng.uniform(0.01, 2.0), size=size))
    return GridMeasure.from_weights(grid, a).normalized(), GridMeasure.from_weights(grid, b).normalized()


def suite_distances(cfg: ExperimentConfig, seed: int, n_pairs: int = 1000, n_contract: int = 100) -> SuiteResult:
    """TV against Hilbert on random pairs, and Hilbert non-increase through one filter step."""
    rng = make_rng(seed, 0, 5)
    rows, ok = [], True
    for i in range(n_pairs):
        mu, nu = random_comparable_pair(rng, int(rng.integers(2, 60)))
        tv, hb = distances(mu, nu)
        good = tv <= TV_HILBERT * hb
        ok &= good
        rows.append(("tv-hilbert", i, tv, hb, TV_HILBERT * hb, good))
    small = with_model(cfg, grid_size=80)
    setup = prepare(small, seed, n_blocks=1)
    for i in range(n_contract):
        mu, nu = random_comparable_pair(rng, setup.grids[0].size)
        mu, nu = GridMeasure(setup.grids[0], mu.logw), GridMeasure(setup.grids[0], nu.logw)
        h0 = distances(mu, nu)[1]
        a = filter_step(mu, setup.coeffs[0], setup.spec, setup.grids[1], setup.log_q(1))
        b = filter_step(nu, setup.coeffs[0], setup.spec, setup.grids[1], setup.log_q(1))
        h1 = distances(a, b)[1]
        good = h1 <= h0 + 1e-9
        ok &= good
        rows.append(("hilbert-step", i, h1, h0, h0 + 1e-9, good))
    return SuiteResult("distances", ["check", "trial", "value", "reference", "limit", "pass"], rows, ok)


SUITES: dict[str, Callable[[ExperimentConfig, int], SuiteResult]] = {
    "covariances": suite_covariances,
    "psi": suite_psi,
    "transition": suite_transition,
    "representation": suite_representation,
    "mixing": suite_mixing,
    "hypotheses": suite_hypotheses,
    "distances": suite_distances,
}


def run_suite(name: str, cfg: ExperimentConfig, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name](cfg, seed)
