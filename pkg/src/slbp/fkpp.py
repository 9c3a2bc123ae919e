"""Deterministic FKPP solvers and the branching-random-walk oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline

from .lattice import DensityField, ModelParams
from .sim import replica_rng, run_replicas, summarize

__all__ = [
    "DensityField",
    "DensityPath",
    "rk4_system",
    "solve",
    "continuum_reference",
    "interpolate",
    "logistic",
    "mckean_estimate",
    "StabilityError",
]


class StabilityError(RuntimeError):
    pass


@njit(cache=True)
def _rhs(y, lap, mu, out):
    n = y.size
    for z in range(n):
        l = y[z - 1] if z > 0 else y[n - 1]
        r = y[z + 1] if z < n - 1 else y[0]
        out[z] = 0.5 * lap * (l + r - 2.0 * y[z]) + y[z] * (mu - 0.5 * y[z])


@njit(cache=True)
def _integrate(y0, lap, mu, dt, nsteps, stride, vals, ders):
    n = y0.size
    y = y0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    _rhs(y, lap, mu, k1)
    vals[0] = y
    ders[0] = k1
    for s in range(nsteps):
        for z in range(n):
            tmp[z] = y[z] + 0.5 * dt * k1[z]
        _rhs(tmp, lap, mu, k2)
        for z in range(n):
            tmp[z] = y[z] + 0.5 * dt * k2[z]
        _rhs(tmp, lap, mu, k3)
        for z in range(n):
            tmp[z] = y[z] + dt * k3[z]
        _rhs(tmp, lap, mu, k4)
        for z in range(n):
            y[z] += dt * (k1[z] + 2.0 * k2[z] + 2.0 * k3[z] + k4[z]) / 6.0
        _rhs(y, lap, mu, k1)
        if (s + 1) % stride == 0:
            vals[(s + 1) // stride] = y
            ders[(s + 1) // stride] = k1
        if not np.isfinite(y[0]):
            return False
    return True


@njit(cache=True)
def hermite_eval(t, t0, h, vals, ders, out):
    """Cubic Hermite interpolation on a uniform time grid."""
    m = vals.shape[0] - 1
    x = (t - t0) / h
    i = int(np.floor(x))
    if i < 0:
        i = 0
    if i >= m:
        i = m - 1
    s = x - i
    if m == 0:
        out[:] = vals[0]
        return
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    for z in range(vals.shape[1]):
        out[z] = h00 * vals[i, z] + h10 * h * ders[i, z] + h01 * vals[i + 1, z] + h11 * h * ders[i + 1, z]


@dataclass
class DensityPath:
    """Solution stored on a uniform time grid with derivatives for Hermite output."""

    t0: float
    step: float
    values: np.ndarray
    derivs: np.ndarray
    lap: float
    mu: float

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.values.shape[0])

    @property
    def t_end(self) -> float:
        return self.t0 + self.step * (self.values.shape[0] - 1)

    @property
    def num_sites(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> DensityField:
        if t < self.t0 - 1e-12 or t > self.t_end + 1e-12:
            raise ValueError(f"time {t} outside [{self.t0}, {self.t_end}]")
        out = np.empty(self.num_sites)
        hermite_eval(float(t), self.t0, self.step, self.values, self.derivs, out)
        return DensityField(out, t)

    def sample(self, times) -> np.ndarray:
        return np.stack([self.at(t).values for t in times])


def rk4_system(y0, lap: float, mu: float, t_end: float, dt: float, store_every: int = 1) -> DensityPath:
    """RK4 for dy/dt = (lap/2)(y(z+1)+y(z-1)-2y(z)) + y(mu - y/2) on a ring."""
    y0 = np.asarray(y0, dtype=np.float64)
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    # RK4 stability on the imaginary-free axis reaches about 2.78; the
    # Laplacian part alone has spectral radius 2 lap
    if dt * 2.0 * lap > 2.78:
        raise StabilityError(f"dt={dt} exceeds the stability bound {2.78 / (2 * lap)}")
    nsteps = max(1, int(np.ceil(t_end / dt - 1e-9))) if t_end > 0 else 0
    stride = max(1, int(store_every))
    if nsteps % stride:
        nsteps += stride - nsteps % stride
    h = t_end / nsteps if nsteps else 0.0
    nstore = nsteps // stride + 1
    vals = np.empty((nstore, y0.size))
    ders = np.empty((nstore, y0.size))
    ok = _integrate(y0, float(lap), float(mu), h, nsteps, stride, vals, ders)
    if not ok or not np.isfinite(vals).all():
        raise StabilityError("non-finite values in FKPP integration")
    return DensityPath(0.0, h * stride if nsteps else 1.0, vals, ders, float(lap), float(mu))


def _values(rho0, K):
    v = rho0.values if isinstance(rho0, DensityField) else np.asarray(rho0, dtype=float)
    if v.shape != (K,):
        raise ValueError(f"expected {K} values, got shape {v.shape}")
    if np.any(v < 0):
        raise ValueError("initial density must be non-negative")
    return v


def solve(rho0, params: ModelParams, t_end: float, dt: float | None = None,
          store_every: int = 1) -> DensityPath:
    """Semi-discrete FKPP: d rho = (1/2) Lap_eps rho + rho (mu_eps - rho/2)."""
    if t_end > params.horizon + 1e-12:
        raise ValueError("t_end beyond the model horizon")
    y0 = _values(rho0, params.num_sites)
    if dt is None:
        dt = params.epsilon ** 2 / 4.0
    return rk4_system(y0, params.epsilon ** -2, params.truncated_mean, t_end, dt, store_every)


def continuum_reference(rho0_profile, t_end: float, M: int, mu: float, dt: float | None = None,
                        store_every: int = 16) -> DensityPath:
    """The same scheme on M points of the unit circle with reaction rate mu."""
    if M < 4:
        raise ValueError("resolution too coarse")
    x = np.arange(M) / M
    y0 = np.asarray(rho0_profile(x), dtype=float) * np.ones(M) if callable(rho0_profile) \
        else _values(rho0_profile, M)
    if dt is None:
        dt = 1.0 / (4.0 * M * M)
    return rk4_system(y0, float(M * M), mu, t_end, dt, store_every)


def interpolate(values) -> CubicSpline:
    """Periodic cubic spline through values at z/K, as a function on [0, 1)."""
    v = values.values if isinstance(values, DensityField) else np.asarray(values, dtype=float)
    K = v.size
    x = np.arange(K + 1) / K
    return CubicSpline(x, np.append(v, v[0]), bc_type="periodic")


def logistic(t, c, mu):
    """Solution of rho' = rho (mu - rho/2) from rho(0) = c."""
    g = np.exp(mu * np.asarray(t, dtype=float))
    return 2.0 * mu * c * g / (2.0 * mu + c * (g - 1.0))


# ---------------------------------------------------------------------------
# branching random walk oracle

MCKEAN_CAP = 10 ** 6


@njit(cache=True)
def _brw_product(g, z, t, mu, half_rate, rng, cap):
    """prod over the leaves at time t of g(position), dyadic BRW from z."""
    K = g.size
    stack_pos = np.empty(64, dtype=np.int64)
    stack_rem = np.empty(64)
    stack_pos[0] = z
    stack_rem[0] = t
    top = 1
    born = 1
    prod = 1.0
    while top > 0:
        top -= 1
        p = stack_pos[top]
        rem = stack_rem[top]
        tau = rng.standard_exponential() / mu if mu > 0 else np.inf
        dt = rem if tau >= rem else tau
        lam = half_rate * dt
        p = (p + rng.poisson(lam) - rng.poisson(lam)) % K
        if tau >= rem:
            prod *= g[p]
            if prod == 0.0:
                return 0.0, born
            continue
        born += 1
        if born > cap:
            return -1.0, born
        if top + 2 > stack_pos.size:
            sp = np.empty(2 * stack_pos.size, dtype=np.int64)
            sr = np.empty(2 * stack_pos.size)
            sp[:top] = stack_pos[:top]
            sr[:top] = stack_rem[:top]
            stack_pos = sp
            stack_rem = sr
        for _ in range(2):
            stack_pos[top] = p
            stack_rem[top] = rem - dt
            top += 1
    return prod, born


@dataclass
class _McKeanWorker:
    g: np.ndarray
    z: int
    t: float
    mu: float
    half_rate: float

    def __call__(self, index, rng):
        prod, born = _brw_product(self.g, self.z, self.t, self.mu, self.half_rate, rng, MCKEAN_CAP)
        if prod < 0:
            raise RuntimeError(f"branching population exceeded {MCKEAN_CAP}")
        return 2.0 * self.mu * (1.0 - prod)


def mckean_estimate(g0, t: float, z: int, params: ModelParams, R: int, seed: int,
                    jobs: int = 1) -> tuple[float, float]:
    """Estimate 2 mu_eps (1 - E prod_u g0(z + Z_u(t))) over R dyadic BRWs.

    Particles branch in two at rate mu_eps and jump at rate eps^-2; the
    estimate equals the FKPP solution from rho0 = 2 mu_eps (1 - g0).
    """
    g = np.asarray(g0, dtype=np.float64)
    if g.shape != (params.num_sites,):
        raise ValueError("g0 must live on the K-site grid")
    if np.any(g < 0) or np.any(g > 1):
        raise ValueError("g0 values must lie in [0, 1]")
    worker = _McKeanWorker(g, int(z) % params.num_sites, float(t), params.truncated_mean,
                           0.5 * params.jump_rate)
    vals = run_replicas(worker, R, seed, jobs)
    st = summarize(vals, "mckean", seed)
    return st.mean, st.stderr
