"""Fluctuation fields, backward test functions and the limiting Gaussian variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.integrate import simpson

from .fkpp import DensityPath, StabilityError, hermite_eval
from .lattice import DensityField, ModelParams, SiteConfig
from .vfunc import v_site

__all__ = [
    "TestFunction",
    "test_function",
    "fluct_field",
    "nonlinear_field",
    "bgp_slice",
    "BackwardTestFamily",
    "backward_solve",
    "limit_variance",
    "limit_variance_terms",
    "ou_spde_simulate",
    "bgp_statistic",
]


@dataclass(frozen=True)
class TestFunction:
    """Smooth periodic function on [0, 1) from a small catalog.

    ids: "zero", "const", "cos<n>", "sin<n>", "bump:<center>:<width>".
    """

    id: str

    __test__ = False

    def _parse(self):
        s = self.id
        if s in ("zero", "const"):
            return s, ()
        if s.startswith("cos") or s.startswith("sin"):
            return s[:3], (int(s[3:] or 1),)
        if s.startswith("bump"):
            _, c, w = s.split(":")
            return "bump", (float(c), float(w))
        raise ValueError(f"unknown test function {s!r}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        kind, a = self._parse()
        if kind == "zero":
            return np.zeros_like(x)
        if kind == "const":
            return np.ones_like(x)
        if kind == "cos":
            return np.cos(2 * np.pi * a[0] * x)
        if kind == "sin":
            return np.sin(2 * np.pi * a[0] * x)
        c, w = a
        return sum(np.exp(-((x - c + k) ** 2) / (2 * w * w)) for k in range(-3, 4))

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        kind, a = self._parse()
        if kind in ("zero", "const"):
            return np.zeros_like(x)
        if kind == "cos":
            return -2 * np.pi * a[0] * np.sin(2 * np.pi * a[0] * x)
        if kind == "sin":
            return 2 * np.pi * a[0] * np.cos(2 * np.pi * a[0] * x)
        c, w = a
        return sum(-(x - c + k) / (w * w) * np.exp(-((x - c + k) ** 2) / (2 * w * w)) for k in range(-3, 4))

    def grid(self, K: int) -> np.ndarray:
        return self(np.arange(K) / K)


def test_function(spec) -> TestFunction:
    return spec if isinstance(spec, TestFunction) else TestFunction(str(spec))


test_function.__test__ = False


def _phi_values(phi, K):
    if isinstance(phi, (TestFunction, str)):
        return test_function(phi).grid(K)
    v = np.asarray(phi, dtype=float)
    if v.shape != (K,):
        raise ValueError(f"test function must have {K} values")
    return v


def _counts(xp):
    return np.atleast_2d(xp.counts if isinstance(xp, SiteConfig) else np.asarray(xp))


def _rho(rho, K):
    v = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    if v.shape[-1] != K:
        raise ValueError("mismatched lattice")
    return v


def fluct_field(xp, rho_t, phi, params: ModelParams):
    """Y(phi) = eps^(1+gamma-kappa) sum_z (X(z) - rho_t(z)) phi(z/K), per row of counts."""
    c = _counts(xp)
    K = c.shape[1]
    if K != params.num_sites:
        raise ValueError("mismatched lattice")
    out = params.field_scale * ((params.e_kappa * c - _rho(rho_t, K)) @ _phi_values(phi, K))
    return float(out[0]) if isinstance(xp, SiteConfig) else out


def nonlinear_field(xp, phi, params: ModelParams, means):
    """F(phi) = (eps^(1+gamma-kappa)/2) sum_z [X(X - eps^kappa) - means(z)] phi(z/K)."""
    c = _counts(xp)
    K = c.shape[1]
    e = params.e_kappa
    X = e * c
    out = 0.5 * params.field_scale * ((X * (X - e) - _rho(means, K)) @ _phi_values(phi, K))
    return float(out[0]) if isinstance(xp, SiteConfig) else out


def bgp_slice(xp, rho, phi, params: ModelParams, means):
    """Both sides of F(phi) - Y(rho phi) = (c/2) sum_z [V2(z) - (means - rho^2)] phi.

    Returns (left, right) per row of counts.
    """
    c = _counts(xp)
    K = c.shape[1]
    r = _rho(rho, K)
    ph = _phi_values(phi, K)
    left = nonlinear_field(c, ph, params, means) - fluct_field(c, r, r * ph, params)
    v2 = v_site(2, c, r[None, :], params.e_kappa)
    right = 0.5 * params.field_scale * ((v2 - (_rho(means, K) - r ** 2)) @ ph)
    return left, right


# ---------------------------------------------------------------------------
# backward equation


@njit(cache=True)
def _back_rhs(y, lap, mu, rho, out):
    n = y.size
    for z in range(n):
        l = y[z - 1] if z > 0 else y[n - 1]
        r = y[z + 1] if z < n - 1 else y[0]
        out[z] = 0.5 * lap * (l + r - 2.0 * y[z]) + (mu - rho[z]) * y[z]


@njit(cache=True)
def _back_integrate(phi, lap, mu, t, dt, nsteps, stride, p0, ph, pvals, pders, vals, ders):
    """psi(tau) = phi_{t - tau, t}; d psi/d tau = (1/2) lap Lap psi + (mu - rho_{t-tau}) psi."""
    n = phi.size
    y = phi.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    r0 = np.empty(n)
    rm = np.empty(n)
    r1 = np.empty(n)
    hermite_eval(t, p0, ph, pvals, pders, r0)
    _back_rhs(y, lap, mu, r0, k1)
    vals[0] = y
    ders[0] = k1
    for s in range(nsteps):
        tau = s * dt
        hermite_eval(t - tau - 0.5 * dt, p0, ph, pvals, pders, rm)
        hermite_eval(t - tau - dt, p0, ph, pvals, pders, r1)
        for z in range(n):
            tmp[z] = y[z] + 0.5 * dt * k1[z]
        _back_rhs(tmp, lap, mu, rm, k2)
        for z in range(n):
            tmp[z] = y[z] + 0.5 * dt * k2[z]
        _back_rhs(tmp, lap, mu, rm, k3)
        for z in range(n):
            tmp[z] = y[z] + dt * k3[z]
        _back_rhs(tmp, lap, mu, r1, k4)
        for z in range(n):
            y[z] += dt * (k1[z] + 2.0 * k2[z] + 2.0 * k3[z] + k4[z]) / 6.0
        _back_rhs(y, lap, mu, r1, k1)
        if (s + 1) % stride == 0:
            vals[(s + 1) // stride] = y
            ders[(s + 1) // stride] = k1
    return np.isfinite(y).all()


@dataclass
class BackwardTestFamily:
    """phi_{s,t} stored at s = t - tau_j on a uniform tau grid."""

    t: float
    step: float
    values: np.ndarray
    derivs: np.ndarray

    @property
    def s_grid(self) -> np.ndarray:
        """Times s in increasing order, matching ``values[::-1]``."""
        return self.t - self.step * np.arange(self.values.shape[0])[::-1]

    def at(self, s: float) -> np.ndarray:
        tau = self.t - s
        if tau < -1e-12 or tau > self.step * (self.values.shape[0] - 1) + 1e-12:
            raise ValueError("s outside [0, t]")
        out = np.empty(self.values.shape[1])
        hermite_eval(float(tau), 0.0, self.step, self.values, self.derivs, out)
        return out

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())


def backward_solve(phi, rho_path: DensityPath, t: float, dt: float | None = None,
                   store_every: int = 4) -> BackwardTestFamily:
    """Solve d_s phi + (1/2) Lap phi + (mu - rho_s) phi = 0 on [0, t], phi_{t,t} = phi.

    Lattice spacing, mu and rho come from ``rho_path``, so the semi-discrete
    and continuum problems share this routine.
    """
    M = rho_path.num_sites
    ph = _phi_values(phi, M)
    if t > rho_path.t_end + 1e-12 or t < 0:
        raise ValueError("rho path does not span [0, t]")
    lap = rho_path.lap
    if dt is None:
        dt = 1.0 / (4.0 * lap)
    if dt * 2.0 * lap > 2.78:
        raise StabilityError("backward step exceeds the RK4 stability bound")
    stride = max(1, int(store_every))
    nsteps = max(1, int(np.ceil(t / dt - 1e-9))) if t > 0 else 0
    if nsteps % stride:
        nsteps += stride - nsteps % stride
    h = t / nsteps if nsteps else 0.0
    nstore = nsteps // stride + 1
    vals = np.empty((nstore, M))
    ders = np.empty((nstore, M))
    ok = _back_integrate(ph, lap, rho_path.mu, float(t), h, nsteps, stride, rho_path.t0,
                         rho_path.step, rho_path.values, rho_path.derivs, vals, ders)
    if not ok:
        raise StabilityError("non-finite values in backward integration")
    return BackwardTestFamily(float(t), h * stride if nsteps else 1.0, vals, ders)


def _spectral_derivative(f: np.ndarray) -> np.ndarray:
    M = f.shape[-1]
    k = 2j * np.pi * np.fft.fftfreq(M, 1.0 / M)
    if M % 2 == 0:
        k[M // 2] = 0.0
    return np.real(np.fft.ifft(np.fft.fft(f, axis=-1) * k, axis=-1))


def limit_variance_terms(phi, rho_path: DensityPath, rho0, t: float, mu: float, sigma2: float):
    """(initial term, r grid, integrand) of the limiting variance."""
    M = rho_path.num_sites
    fam = backward_solve(phi, rho_path, t)
    r0 = _rho(rho0, M)
    tau = fam.step * np.arange(fam.values.shape[0])
    r = t - tau
    phis = fam.values
    rhos = rho_path.sample(r)
    dphi = _spectral_derivative(phis)
    integrand = (dphi ** 2 * rhos).mean(axis=1) + \
        (phis ** 2 * ((sigma2 + mu ** 2) * rhos + 0.5 * rhos ** 2)).mean(axis=1)
    initial = float((phis[-1] ** 2 * r0).mean())
    return initial, r[::-1], integrand[::-1]


def limit_variance(phi, rho_path: DensityPath, rho0, t: float, mu: float, sigma2: float) -> float:
    """Variance at time t of the limiting Gaussian pairing Y_t(phi)."""
    if t == 0:
        return float((_phi_values(phi, rho_path.num_sites) ** 2 * _rho(rho0, rho_path.num_sites)).mean())
    initial, r, f = limit_variance_terms(phi, rho_path, rho0, t, mu, sigma2)
    if np.any(f < -1e-14):
        raise ArithmeticError("negative quadratic-variation integrand")
    return initial + float(simpson(f, x=r))


# ---------------------------------------------------------------------------
# reference SPDE


def ou_spde_simulate(rho_path: DensityPath, phi, t: float, rho0, mu: float, sigma2: float,
                     R: int, rng: np.random.Generator, dt: float = 5e-3,
                     noise: float = 1.0, initial_noise: float = 1.0) -> np.ndarray:
    """R samples of Y_t(phi) for dY = [(1/2) d_z^2 + mu - rho] Y dt + noise.

    Y lives on M = rho_path.num_sites grid points (M Fourier modes).  The
    conservative noise is d_z(sqrt(rho) W1); the reactive noise has
    amplitude sqrt((sigma2 + mu^2) rho + rho^2/2).  The Laplacian is
    integrated exactly in Fourier space (including the variance of the
    damped noise over a step), the reaction term by Euler-Maruyama.
    """
    M = rho_path.num_sites
    if M % 2:
        raise ValueError("need an even number of modes")
    h = 1.0 / M
    ph = _phi_values(phi, M)
    k = 2 * np.pi * np.fft.rfftfreq(M, h)
    ik = 1j * k
    ik[-1] = 0.0
    nsteps = max(1, int(np.ceil(t / dt - 1e-9)))
    dt = t / nsteps
    semigroup = np.exp(-0.5 * k ** 2 * dt)
    # exact variance of the heat-damped noise over one step, mode by mode
    kk = k ** 2 * dt
    noise_gain = np.sqrt(np.where(kk > 0, -np.expm1(-kk) / np.where(kk > 0, kk, 1.0), 1.0))
    rhos = rho_path.sample(dt * np.arange(nsteps))
    r0 = _rho(rho0, M)
    Y = initial_noise * np.sqrt(r0 / h)[None, :] * rng.standard_normal((R, M))
    Yh = np.fft.rfft(Y, axis=1)
    scale = noise * np.sqrt(dt / h)
    for n in range(nsteps):
        rho = rhos[n]
        a1 = scale * np.sqrt(rho)
        a2 = scale * np.sqrt((sigma2 + mu ** 2) * rho + 0.5 * rho ** 2)
        Y = np.fft.irfft(Yh, n=M, axis=1)
        drift = (dt * (mu - rho))[None, :] * Y
        Yh = (Yh + np.fft.rfft(drift, axis=1)) * semigroup[None, :] + noise_gain[None, :] * (
            np.fft.rfft(a2[None, :] * rng.standard_normal((R, M)), axis=1)
            + ik[None, :] * np.fft.rfft(a1[None, :] * rng.standard_normal((R, M)), axis=1))
    Y = np.fft.irfft(Yh, n=M, axis=1)
    if not np.isfinite(Y).all():
        raise StabilityError("non-finite SPDE state")
    return h * (Y @ ph)


# ---------------------------------------------------------------------------
# Boltzmann-Gibbs statistic


def bgp_window_average(integrals: np.ndarray, edges: np.ndarray, rho_mid: np.ndarray, phi,
                       params: ModelParams, mean_sq: np.ndarray) -> np.ndarray:
    """Per-replica time average of F_r(phi) - Y_r(rho_r phi) over the window.

    integrals: (R, bins, >=2, K) bin integrals of n and n^2; rho_mid:
    (bins, K) centering at bin midpoints; mean_sq: (bins, K) surrogate for
    the bin integral of E[X(X - eps^kappa)].
    """
    e = params.e_kappa
    K = params.num_sites
    ph = _phi_values(phi, K)
    w = np.diff(edges)
    I1 = integrals[:, :, 0, :]
    I2 = integrals[:, :, 1, :]
    sq = e * e * (I2 - I1)
    lin = e * I1 - rho_mid[None] * w[None, :, None]
    body = 0.5 * (sq - mean_sq[None]) - rho_mid[None] * lin
    return params.field_scale * (body @ ph).sum(axis=1) / (edges[-1] - edges[0])


def bgp_statistic(integrals: np.ndarray, edges, phi, S: float, rho_mid: np.ndarray,
                  params: ModelParams, pilot_integrals: np.ndarray | None = None,
                  estimator: str = "shift-invariant") -> tuple[float, float]:
    """Mean square of the window-averaged BGP residual, and its standard error.

    "pilot": plain mean of squares with E[X(X - eps^kappa)] taken from the
    disjoint pilot replicas.  The pilot's sampling error moves every replica
    by one common shift, so this estimate carries a random offset of the
    size Var(sq part)/R_pilot.
    "shift-invariant": sample variance of the window averages (blind to any
    common shift, so to the centering of the squared field) plus the
    unbiased square of the mean of the linear part, which needs no
    surrogate.  The pilot is not used.
    """
    edges = np.asarray(edges, dtype=float)
    width = params.epsilon ** 2 * S
    if abs((edges[-1] - edges[0]) - width) > 1e-9 * max(width, 1.0):
        raise ValueError("bin edges must span a window of length eps^2 S")
    if edges[-1] > params.horizon + 1e-12:
        raise ValueError("window exceeds the trajectory horizon")
    e = params.e_kappa
    K = params.num_sites
    if estimator == "pilot":
        if pilot_integrals is None:
            raise ValueError("the pilot estimator needs pilot replicas")
        mean_sq = (e * e * (pilot_integrals[:, :, 1, :] - pilot_integrals[:, :, 0, :])).mean(axis=0)
        sq = bgp_window_average(integrals, edges, rho_mid, phi, params, mean_sq) ** 2
        return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(sq.size))
    if estimator != "shift-invariant":
        raise ValueError(f"unknown estimator {estimator!r}")
    R = integrals.shape[0]
    a = bgp_window_average(integrals, edges, rho_mid, phi, params, np.zeros(rho_mid.shape))
    ph = _phi_values(phi, K)
    w = np.diff(edges)
    lin = e * integrals[:, :, 0, :] - rho_mid[None] * w[None, :, None]
    l = -params.field_scale * ((rho_mid[None] * lin) @ ph).sum(axis=1) / (edges[-1] - edges[0])
    d = a - a.mean()
    var = float(d @ d) / (R - 1)
    bias2 = float(l.mean()) ** 2 - float(l.var(ddof=1)) / R
    se = float(np.sqrt(np.var(d ** 2, ddof=1) / R + 4.0 * max(bias2, 0.0) * l.var(ddof=1) / R))
    return var + bias2, se
