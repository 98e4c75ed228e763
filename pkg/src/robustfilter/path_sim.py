"""Signal/observation simulation, Brownian bridges and observation integrals.

The signal is X_t = X_0 + int f(X) ds + V_t and the observation is
Y_t = int h X ds + W_t, with V and W independent standard Brownian motions.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, localcontext
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

DRIFT_FAMILIES = ("zero", "scaled-tanh", "scaled-sine", "tabulated")


def make_rng(seed: int, block: int = 0, replicate: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, block, replicate)."""
    ss = np.random.SeedSequence([int(seed), int(block), int(replicate)])
    return np.random.Generator(np.random.Philox(ss))


def _log_cosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


@dataclass(frozen=True)
class DriftSpec:
    """Drift f with sup-norm bound M on f and f'.

    For the tabulated family, ``table`` is (grid, f values, f' values) on a
    uniform grid; values are linearly interpolated and held constant outside.
    """

    family: str = "zero"
    amplitude: float = 0.0
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in DRIFT_FAMILIES:
            raise ValueError(f"unknown drift family {self.family!r}")
        if self.amplitude < 0:
            raise ValueError("drift amplitude M must be nonnegative")
        if self.family == "tabulated" and self.table is None:
            raise ValueError("tabulated drift needs a table")

    @property
    def M(self) -> float:
        return float(self.amplitude)

    @property
    def is_zero(self) -> bool:
        return self.family == "zero" or self.amplitude == 0.0

    def f(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "zero":
            return np.zeros_like(x)
        if self.family == "scaled-tanh":
            return self.amplitude * np.tanh(x)
        if self.family == "scaled-sine":
            return self.amplitude * np.sin(x)
        grid, fv, _ = self.table
        return np.interp(x, grid, fv)

    def fprime(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "zero":
            return np.zeros_like(x)
        if self.family == "scaled-tanh":
            return self.amplitude / np.cosh(np.clip(x, -350, 350)) ** 2
        if self.family == "scaled-sine":
            return self.amplitude * np.cos(x)
        grid, _, dfv = self.table
        return np.interp(x, grid, dfv)

    def primitive(self, x):
        """F with F' = f and F(0) = 0."""
        x = np.asarray(x, dtype=float)
        if self.family == "zero":
            return np.zeros_like(x)
        if self.family == "scaled-tanh":
            return self.amplitude * _log_cosh(x)
        if self.family == "scaled-sine":
            return self.amplitude * (1.0 - np.cos(x))
        grid, fv, _ = self.table
        grid = np.asarray(grid, dtype=float)
        cum = cumulative_trapezoid(fv, grid, initial=0.0)
        cum = cum - np.interp(0.0, grid, cum)
        inside = np.interp(x, grid, cum)
        # constant extension of f beyond the table
        left = cum[0] + fv[0] * (x - grid[0])
        right = cum[-1] + fv[-1] * (x - grid[-1])
        return np.where(x < grid[0], left, np.where(x > grid[-1], right, inside))

    def validate(self, n_points: int = 10_000, span: float = 50.0) -> None:
        """Check sup|f| <= M and sup|f'| <= M on a sample of points."""
        xs = np.linspace(-span, span, n_points)
        if self.family == "tabulated":
            grid = np.asarray(self.table[0], dtype=float)
            xs = np.linspace(grid[0], grid[-1], n_points)
        tol = 1e-12 * max(1.0, self.amplitude)
        fv, dfv = self.f(xs), self.fprime(xs)
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(dfv))):
            raise ValueError("drift produced non-finite values")
        if np.max(np.abs(fv)) > self.amplitude + tol:
            raise ValueError(f"sup|f| = {np.max(np.abs(fv)):.6g} exceeds M = {self.amplitude}")
        if np.max(np.abs(dfv)) > self.amplitude + tol:
            raise ValueError(f"sup|f'| = {np.max(np.abs(dfv)):.6g} exceeds M = {self.amplitude}")


@dataclass(frozen=True)
class ObservationPath:
    """Observation trajectory on a uniform grid, cut into blocks of length tau.

    ``x`` is the hidden signal, ``w`` and ``v`` the cumulative observation
    and signal noises. All three are optional.
    """

    dt: float
    tau: float
    y: np.ndarray
    x: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        ratio = self.tau / self.dt
        steps = int(round(ratio))
        if abs(ratio - steps) > 1e-9 * ratio or steps < 100:
            raise ValueError(f"tau/dt = {ratio} must be an integer >= 100")
        if (len(self.y) - 1) % steps != 0:
            raise ValueError("path length is not a whole number of blocks")
        if self.y[0] != 0.0:
            raise ValueError("observation path must start at 0")
        for name in ("y", "x", "w", "v"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def steps_per_block(self) -> int:
        return int(round(self.tau / self.dt))

    @property
    def n_blocks(self) -> int:
        return (len(self.y) - 1) // self.steps_per_block

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.y))

    @property
    def horizon(self) -> float:
        return self.dt * (len(self.y) - 1)

    def block_slice(self, k: int) -> slice:
        if not 1 <= k <= self.n_blocks:
            raise IndexError(f"block {k} outside 1..{self.n_blocks}")
        n = self.steps_per_block
        return slice((k - 1) * n, k * n + 1)

    def signal_at_block_ends(self) -> np.ndarray:
        if self.x is None:
            raise ValueError("path carries no hidden signal")
        return self.x[:: self.steps_per_block]


def sup_variation(values: np.ndarray) -> float:
    """sup over pairs |v(s1) - v(s2)| on a window, i.e. max - min."""
    return float(np.max(values) - np.min(values))


def noise_variations(path: ObservationPath, k0: int, k1: int) -> tuple[float, float]:
    """Signal and observation noise oscillations over blocks k0+1..k1."""
    if path.w is None or path.v is None:
        raise ValueError("path carries no noise records")
    n = path.steps_per_block
    sl = slice(k0 * n, k1 * n + 1)
    return sup_variation(path.v[sl]), sup_variation(path.w[sl])


def simulate_paths(
    model,
    horizon: float,
    seed: int,
    x0: Optional[float] = None,
    signal_noise: bool = True,
    observation_noise: bool = True,
) -> ObservationPath:
    """Euler-Maruyama simulation of the signal and observation.

    ``model`` needs attributes h, tau, dt, drift and a ``sample_prior(rng, n)``
    method (used when ``x0`` is None). Noise for block k comes from the
    stream (seed, k, 0) so runs are reproducible block by block.
    """
    tau, dt, h = model.tau, model.dt, model.h
    n_blocks = horizon / tau
    if abs(n_blocks - round(n_blocks)) > 1e-9 * max(1.0, n_blocks) or round(n_blocks) < 1:
        raise ValueError(f"horizon {horizon} is not a positive multiple of tau = {tau}")
    n_blocks = int(round(n_blocks))
    steps = int(round(tau / dt))
    drift = model.drift
    drift.validate()
    if x0 is None:
        x0 = float(model.sample_prior(make_rng(seed, 0, 1), 1)[0])

    n_total = n_blocks * steps
    x = np.empty(n_total + 1)
    y = np.empty(n_total + 1)
    v = np.empty(n_total + 1)
    w = np.empty(n_total + 1)
    x[0], y[0], v[0], w[0] = x0, 0.0, 0.0, 0.0
    sq = np.sqrt(dt)
    for k in range(1, n_blocks + 1):
        rng = make_rng(seed, k, 0)
        dv = rng.standard_normal(steps) * sq
        dw = rng.standard_normal(steps) * sq
        if not signal_noise:
            dv[:] = 0.0
        if not observation_noise:
            dw[:] = 0.0
        base = (k - 1) * steps
        if drift.is_zero:
            xs = x[base] + np.concatenate(([0.0], np.cumsum(dv)))
            x[base : base + steps + 1] = xs
        else:
            for i in range(steps):
                j = base + i
                x[j + 1] = x[j] + float(drift.f(x[j])) * dt + dv[i]
        xs = x[base : base + steps]
        y[base + 1 : base + steps + 1] = y[base] + np.cumsum(h * xs * dt + dw)
        v[base + 1 : base + steps + 1] = v[base] + np.cumsum(dv)
        w[base + 1 : base + steps + 1] = w[base] + np.cumsum(dw)
        bad = ~np.isfinite(x[base : base + steps + 1])
        if bad.any():
            raise FloatingPointError(f"non-finite signal at step {base + int(np.argmax(bad))}")
    return ObservationPath(dt=dt, tau=tau, y=y, x=x, w=w, v=v)


@dataclass(frozen=True)
class BridgeSample:
    times: np.ndarray
    values: np.ndarray

    @property
    def first(self) -> float:
        return float(self.values[0])

    @property
    def last(self) -> float:
        return float(self.values[-1])


def standard_bridges(n_paths: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-time Brownian bridges from 0 to 0, shape (n_paths, n_steps + 1)."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    inc = rng.standard_normal((n_paths, n_steps)) * np.sqrt(1.0 / n_steps)
    b = np.zeros((n_paths, n_steps + 1))
    np.cumsum(inc, axis=1, out=b[:, 1:])
    s = np.linspace(0.0, 1.0, n_steps + 1)
    b -= s * b[:, -1:]
    b[:, -1] = 0.0
    return b


def sample_bridge(x: float, z: float, tau: float, n_steps: int, seed: int, noise: bool = True) -> BridgeSample:
    """Brownian bridge from x at time 0 to z at time tau."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    s = np.linspace(0.0, 1.0, n_steps + 1)
    core = standard_bridges(1, n_steps, make_rng(seed))[0] if noise else np.zeros(n_steps + 1)
    values = x * (1.0 - s) + z * s + np.sqrt(tau) * core
    values[0], values[-1] = x, z
    return BridgeSample(times=tau * s, values=values)


def stable_sinh_kernel(theta: float, s, naive: bool = False):
    """e^{-theta} sinh(theta s) / theta, evaluated without overflow.

    The naive form is only allowed while e^{theta} fits in a double.
    """
    s = np.asarray(s, dtype=float)
    if naive:
        if theta > 700.0:
            raise OverflowError(f"naive sinh kernel overflows at theta = {theta}; use the stable form")
        return np.exp(-theta) * np.sinh(theta * s) / theta
    return (np.exp(theta * (s - 1.0)) - np.exp(-theta * (s + 1.0))) / (2.0 * theta)


def stable_cosh_kernel(theta: float, s):
    """e^{-theta} cosh(theta s), evaluated without overflow."""
    s = np.asarray(s, dtype=float)
    return 0.5 * (np.exp(theta * (s - 1.0)) + np.exp(-theta * (s + 1.0)))


PhiLike = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, Sequence[float]]


def block_unit_grid(path: ObservationPath) -> np.ndarray:
    return np.linspace(0.0, 1.0, path.steps_per_block + 1)


def stieltjes_integral(path: ObservationPath, block: int, phi: PhiLike) -> float:
    """Left-point sum of phi(s_i) (Y at s_{i+1} - Y at s_i) over block k.

    ``phi`` is a callable on the unit grid of the block or its samples there.
    """
    sl = path.block_slice(block)
    dy = np.diff(path.y[sl])
    s = block_unit_grid(path)
    vals = phi(s) if callable(phi) else np.asarray(phi, dtype=float)
    if vals.shape != s.shape:
        raise ValueError(f"phi must have {s.size} samples, got {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("phi has non-finite samples")
    return float(np.sum(vals[:-1] * dy))


def extract_block(path: ObservationPath, k: int) -> ObservationPath:
    """Block k as its own path, re-based to time 0 and value 0."""
    sl = path.block_slice(k)
    y = path.y[sl] - path.y[sl.start]
    w = None if path.w is None else path.w[sl] - path.w[sl.start]
    v = None if path.v is None else path.v[sl] - path.v[sl.start]
    x = None if path.x is None else path.x[sl].copy()
    return ObservationPath(dt=path.dt, tau=path.tau, y=y, x=x, w=w, v=v)


def blocks(path: ObservationPath) -> list[ObservationPath]:
    return [extract_block(path, k) for k in range(1, path.n_blocks + 1)]


def path_from_increments(dt: float, tau: float, dy: np.ndarray) -> ObservationPath:
    return ObservationPath(dt=dt, tau=tau, y=np.concatenate(([0.0], np.cumsum(dy))))


# CSV: time is written as an exact decimal number of microseconds, floats with
# their shortest round-trip representation.

def _micro(t: float) -> str:
    with localcontext() as ctx:
        ctx.prec = 80
        d = Decimal(t) * 1_000_000
    s = format(d.normalize(), "f")
    return s


def _unmicro(s: str) -> float:
    with localcontext() as ctx:
        ctx.prec = 80
        return float(Decimal(s) / 1_000_000)


def write_path_csv(path: ObservationPath, filename) -> None:
    cols = ["t", "y"]
    extra = [("x", path.x), ("w", path.w)]
    cols += [name for name, arr in extra if arr is not None]
    times = path.times
    with open(filename, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(path.y)):
            row = [_micro(times[i]), repr(float(path.y[i]))]
            row += [repr(float(arr[i])) for _, arr in extra if arr is not None]
            fh.write(",".join(row) + "\n")


def read_path_csv(filename, tau: float) -> ObservationPath:
    with open(filename) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["t", "y"]:
            raise ValueError(f"unexpected header {header}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    t = [_unmicro(r[0]) for r in rows]
    data = {name: np.array([float(r[j]) for r in rows]) for j, name in enumerate(header) if name != "t"}
    dt = t[1] - t[0]
    return ObservationPath(dt=dt, tau=tau, y=data["y"], x=data.get("x"), w=data.get("w"))
