"""V-functions, their Monte Carlo means, and the closed hierarchy coefficients."""

from __future__ import annotations

import itertools
from math import comb, factorial

import numpy as np

from .lattice import DensityField, ModelParams, SiteConfig, TestConfig, falling_factorial, ff_float

__all__ = [
    "MAX_ORDER",
    "v_site",
    "v_exact",
    "v_direct",
    "v_values",
    "v_translation_average",
    "v_estimate",
    "config_catalog",
    "hierarchy_coeff",
    "hierarchy_coeffs_numeric",
    "product_coeffs",
    "gbc_q_site",
    "generator_moment_rhs",
    "hierarchy_rhs_values",
    "hierarchy_residual",
]

MAX_ORDER = 6


def _rho_values(rho, K):
    v = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    if v.shape != (K,):
        raise ValueError(f"centering field must have {K} values")
    return v


def v_site(k: int, q, u, e: float):
    """V~_k(q, u) = sum_l C(k, l) e^l Q_l(q) (-u)^(k-l); broadcasts over q and u."""
    q = np.asarray(q)
    u = np.asarray(u, dtype=float)
    out = np.zeros(np.broadcast(q, u).shape)
    for l in range(k + 1):
        out = out + comb(k, l) * e ** l * ff_float(l, q) * (-u) ** (k - l)
    return out


def v_exact(x: TestConfig, xp: SiteConfig, rho, params: ModelParams) -> float:
    """V(x, x'; rho) through its per-site factorisation."""
    if x.order > MAX_ORDER:
        raise ValueError(f"order above {MAX_ORDER} not supported")
    if x.num_sites != xp.num_sites:
        raise ValueError("lattice size mismatch")
    r = _rho_values(rho, x.num_sites)
    out = 1.0
    for z, k in x.entries.items():
        out *= float(v_site(k, xp.counts[z], r[z], params.e_kappa))
    return out


def v_direct(x: TestConfig, xp: SiteConfig, rho, params: ModelParams) -> float:
    """Signed sum over labelled sub-configurations x0 of x (2^n terms)."""
    r = _rho_values(rho, x.num_sites)
    sites = x.sites()
    e = params.e_kappa
    total = 0.0
    for mask in itertools.product((0, 1), repeat=len(sites)):
        kept: dict[int, int] = {}
        weight = 1.0
        for z, keep in zip(sites, mask):
            if keep:
                kept[z] = kept.get(z, 0) + 1
            else:
                weight *= -r[z]
        for z, k in kept.items():
            weight *= e ** k * falling_factorial(k, int(xp.counts[z]))
        total += weight
    return total


def v_values(x: TestConfig, counts: np.ndarray, rho, params: ModelParams) -> np.ndarray:
    """V(x, counts[i]; rho) for every row of an (R, K) count array."""
    counts = np.atleast_2d(counts)
    r = _rho_values(rho, counts.shape[1])
    out = np.ones(counts.shape[0])
    for z, k in x.entries.items():
        out *= v_site(k, counts[:, z], r[z], params.e_kappa)
    return out


def v_translation_average(x: TestConfig, counts: np.ndarray, rho, params: ModelParams) -> np.ndarray:
    """(1/K) sum_s V(x + s, counts[i]; rho), row by row."""
    counts = np.atleast_2d(counts)
    K = counts.shape[1]
    r = _rho_values(rho, K)
    prod = np.ones(counts.shape)
    for z, k in x.entries.items():
        prod *= np.roll(v_site(k, counts, r[None, :], params.e_kappa), -z, axis=1)
    return prod.mean(axis=1)


def v_estimate(x: TestConfig, counts: np.ndarray, rho_t, params: ModelParams,
               average: bool = False, min_replicas: int = 100) -> tuple[float, float]:
    """Monte Carlo mean and standard error of V(x, X_t; rho_t)."""
    counts = np.asarray(counts)
    if counts.size == 0:
        raise ValueError("empty ensemble")
    if counts.shape[0] < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas")
    vals = (v_translation_average if average else v_values)(x, counts, rho_t, params)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


def config_catalog(K: int) -> dict[str, TestConfig]:
    """Small test configurations used by the scans."""
    return {
        "single": TestConfig(K, {0: 1}),
        "pair_same": TestConfig(K, {0: 2}),
        "pair_adjacent": TestConfig(K, {0: 1, 1: 1}),
        "pair_antipodal": TestConfig(K, {0: 1, K // 2: 1}),
        "triple_same": TestConfig(K, {0: 3}),
        "triple_mixed": TestConfig(K, {0: 2, 1: 1}),
    }


# ---------------------------------------------------------------------------
# coefficients


def _tails(params: ModelParams) -> np.ndarray:
    """T_l = sum_{j >= l} p_j for l = 1..L."""
    p = np.asarray(params.truncated_pmf)
    return np.cumsum(p[::-1])[::-1]


def _qe(e, i, n):
    return e ** i * falling_factorial(i, n)


def hierarchy_coeff(h: int, m: int, u: float, params: ModelParams, printed: bool = False) -> float:
    """Coefficient c_h(m, u) of V~_{m+h} in the birth-competition action on V~_m.

    The birth part expands q Q_{k-1-i}(q) = Q_{k-i}(q) + (k-1-i) Q_{k-1-i}(q);
    ``printed=True`` uses (k-1) in place of (k-1-i), which differs only for
    laws with mass above l = 1.
    """
    if not 1 <= m <= MAX_ORDER or not -m <= h <= 1:
        raise ValueError(f"index out of range: h={h}, m={m}")
    if m == 1 and h == -1:
        # u sum_l T_l - u (mu - u/2) - u^2/2 with sum_l T_l = mu: zero identically
        return 0.0
    e = params.e_kappa
    tails = _tails(params)
    target = m + h
    cplus = 0.0
    for k in range(1, m + 1):
        pre = comb(m, k) * (-u) ** (m - k) * k
        for ell in range(1, params.truncation + 1):
            T = tails[ell - 1]
            if T == 0.0:
                continue
            for i in range(k):
                w = comb(k - 1, i) * _qe(e, i, ell - 1)
                if w == 0.0:
                    continue
                for r in range(min(1, k - 1 - i) + 1):
                    arg = (k - 1) if printed else (k - 1 - i)
                    n = k - i - r
                    a = n - target
                    if 0 <= a <= n:
                        cplus += pre * T * w * _qe(e, r, arg) * comb(n, a) * u ** a
    cminus = 0.0
    for k in range(1, m + 1):
        pre = comb(m, k) * (-u) ** (m - k) * k / 2.0
        for j in range(min(1, k - 1) + 1):
            n = k + 1 - j
            a = n - target
            if 0 <= a <= n:
                cminus += pre * _qe(e, j, k - 1) * comb(n, a) * u ** a
    out = cplus - cminus
    if h == -1:
        out -= m * u * (params.truncated_mean - u / 2.0)
    return out


def hierarchy_coeffs_numeric(m: int, u: float, params: ModelParams) -> np.ndarray:
    """c_h(m, u) for h = -m..1 by solving the single-site identity.

    (G_bc V~_m(., u))(q) - m u (mu - u/2) V~_{m-1}(q, u) = sum_h c_h V~_{m+h}(q, u)
    for q = 0..m+4, least squares in the V~ basis.  Independent of the
    closed form.
    """
    e = params.e_kappa
    p = np.asarray(params.truncated_pmf)
    ell = params.offspring
    q = np.arange(m + 5)

    def f(n):
        return v_site(m, n, u, e)

    birth = q * sum(p[i] * (f(q + ell[i]) - f(q)) for i in range(ell.size))
    death = e * q * (q - 1) / 2.0 * (f(np.maximum(q - 1, 0)) - f(q))
    lhs = birth + death - m * u * (params.truncated_mean - u / 2.0) * v_site(m - 1, q, u, e)
    A = np.column_stack([v_site(j, q, u, e) for j in range(0, m + 2)])
    coef, *_ = np.linalg.lstsq(A, lhs, rcond=None)
    return coef


def product_coeffs(k: int, m: int, u: float, params: ModelParams) -> np.ndarray:
    """c_0..c_{k+m} with V~_k V~_m = sum_r c_r V~_r at the same (q, u)."""
    if k < 0 or m < 0 or k + m > 8:
        raise ValueError("need k, m >= 0 with k + m <= 8")
    e = params.e_kappa
    c = np.zeros(k + m + 1)
    for j1 in range(k + 1):
        for j2 in range(m + 1):
            base = comb(k, j1) * comb(m, j2) * (-1) ** (k + m - j1 - j2)
            for l in range(min(j1, j2) + 1):
                w = base * comb(j1, l) * comb(j2, l) * factorial(l) * e ** l
                n = j1 + j2 - l
                for r in range(n + 1):
                    c[r] += w * comb(n, r) * u ** (k + m - l - r)
    return c


def gbc_q_site(k: int, q: int, params: ModelParams) -> float:
    """Birth-competition generator applied to e^k Q_k at a site holding q."""
    e = params.e_kappa
    p = np.asarray(params.truncated_pmf)
    birth = 0.0
    if q > 0 and k > 0:
        qk = falling_factorial(k, q)
        for ell in range(1, params.truncation + 1):
            if p[ell - 1] != 0.0:
                birth += p[ell - 1] * (falling_factorial(k, q + ell) - qk)
        birth *= e ** k * q
    death = 0.0
    if k > 0 and q > 1:
        death = k * e ** (k + 1) * q * (q - 1) / 2.0 * falling_factorial(k - 1, q - 1)
    return birth - death


def generator_moment_rhs(x: TestConfig, xp: SiteConfig, params: ModelParams) -> float:
    """Birth-competition generator applied to Q(x, .) and evaluated at x'."""
    if x.order > 4:
        raise ValueError("order above 4 not supported")
    if x.num_sites != xp.num_sites:
        raise ValueError("lattice size mismatch")
    e = params.e_kappa
    local = {z: (e ** k * falling_factorial(k, int(xp.counts[z])), gbc_q_site(k, int(xp.counts[z]), params))
             for z, k in x.entries.items()}
    total = 0.0
    for z in local:
        term = local[z][1]
        for w, (q, _) in local.items():
            if w != z:
                term *= q
        total += term
    return total


# ---------------------------------------------------------------------------
# hierarchy


def hierarchy_rhs_values(x: TestConfig, counts: np.ndarray, rho, params: ModelParams) -> np.ndarray:
    """Per-replica right-hand side of the hierarchy for V(x, .; rho).

    (1/2) Lap_x V(x) + sum_z sum_h c_h(k_z, rho(z)) V(x^(z,h)), the Laplacian
    acting on the positions of the particles of x.
    """
    counts = np.atleast_2d(counts)
    r = _rho_values(rho, counts.shape[1])
    half = 0.5 * params.jump_rate
    base = v_values(x, counts, r, params)
    out = np.zeros(counts.shape[0])
    for z, k in x.entries.items():
        lap = v_values(x.moved(z, 1), counts, r, params) + v_values(x.moved(z, -1), counts, r, params) - 2 * base
        out += k * half * lap
        for h in range(-k, 2):
            y = x.shifted(z, h)
            out += hierarchy_coeff(h, k, r[z], params) * v_values(y, counts, r, params)
    return out


def hierarchy_residual(x: TestConfig, dt: float, counts_t: np.ndarray, counts_tdt: np.ndarray,
                       rho_t, rho_tdt, params: ModelParams, paired: bool = True,
                       scheme: str = "forward") -> tuple[float, float]:
    """(v_{t+dt} - v_t)/dt minus the hierarchy right-hand side, with a standard error.

    ``paired`` means row i of both ensembles comes from the same trajectory,
    and the error bar is taken over per-replica residuals.  ``scheme`` is
    "forward" (right-hand side at t) or "trapezoid" (mean of both ends).
    """
    if x.order == 0:
        return 0.0, 0.0
    if x.order > 3:
        raise ValueError("order above 3 not supported")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scheme not in ("forward", "trapezoid"):
        raise ValueError("unknown scheme")
    a = v_values(x, counts_t, rho_t, params)
    b = v_values(x, counts_tdt, rho_tdt, params)
    ra = hierarchy_rhs_values(x, counts_t, rho_t, params)
    if scheme == "trapezoid":
        rb = hierarchy_rhs_values(x, counts_tdt, rho_tdt, params)
    if paired:
        if a.shape != b.shape:
            raise ValueError("paired ensembles must have equal size")
        res = (b - a) / dt - (ra if scheme == "forward" else 0.5 * (ra + rb))
        n = res.size
        if n < 2:
            raise ValueError("insufficient replicas")
        return float(res.mean()), float(res.std(ddof=1) / np.sqrt(n))
    parts = [(b / dt, 1.0), (a / dt, -1.0)]
    if scheme == "forward":
        parts.append((ra, -1.0))
    else:
        parts += [(ra, -0.5), (rb, -0.5)]
    mean = sum(s * v.mean() for v, s in parts)
    # terms evaluated on the same ensemble are correlated; combine per ensemble
    ea = a / dt * -1.0 - (ra if scheme == "forward" else 0.5 * ra)
    eb = b / dt - (0 if scheme == "forward" else 0.5 * rb)
    se = np.sqrt(ea.var(ddof=1) / ea.size + eb.var(ddof=1) / eb.size)
    return float(mean), float(se)
