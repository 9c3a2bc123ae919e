"""Configurations on the discrete circle, falling factorials and model parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "falling_factorial",
    "stirling_first",
    "stirling_second",
    "OffspringLaw",
    "binary_law",
    "geometric_law",
    "finite_law",
    "resolve_law",
    "default_truncation",
    "ModelParams",
    "derive_params",
    "SiteConfig",
    "TestConfig",
    "q_eps",
    "DensityField",
    "ff_float",
]


def falling_factorial(k: int, n: int) -> int:
    """n (n-1) ... (n-k+1); 1 for k = 0 and 0 for k > n."""
    if k < 0 or n < 0:
        raise ValueError("falling_factorial takes non-negative integers")
    if k > n:
        return 0
    out = 1
    for j in range(k):
        out *= n - j
    return out


def ff_float(k: int, n):
    """Elementwise falling factorial of an integer array, as float64."""
    n = np.asarray(n, dtype=np.float64)
    out = np.ones_like(n)
    for j in range(k):
        out *= np.maximum(n - j, 0.0)
    return out


@lru_cache(maxsize=None)
def _stirling_tables(size: int):
    s1 = [[0] * (size + 1) for _ in range(size + 1)]
    s2 = [[0] * (size + 1) for _ in range(size + 1)]
    s1[0][0] = 1
    s2[0][0] = 1
    for n in range(size):
        for k in range(1, n + 2):
            s1[n + 1][k] = s1[n][k - 1] - n * s1[n][k]
            s2[n + 1][k] = k * s2[n][k] + s2[n][k - 1]
    return s1, s2


def _check_stirling_args(a: int, b: int):
    if a < 0 or b < 0 or b > a:
        raise ValueError(f"Stirling index out of range: ({a}, {b})")


def stirling_first(k: int, i: int) -> int:
    """Signed Stirling number of the first kind: Q_k(n) = sum_i s(k, i) n^i."""
    _check_stirling_args(k, i)
    s1, _ = _stirling_tables(max(k, 16))
    return s1[k][i]


def stirling_second(j: int, l: int) -> int:
    """Stirling number of the second kind: n^j = sum_l S(j, l) Q_l(n)."""
    _check_stirling_args(j, l)
    _, s2 = _stirling_tables(max(j, 16))
    return s2[j][l]


# ---------------------------------------------------------------------------
# offspring laws


@dataclass(frozen=True)
class OffspringLaw:
    """Law of the number of particles added at a branching event (support l >= 1)."""

    kind: str
    args: tuple = ()

    def pmf(self, l) -> np.ndarray:
        l = np.asarray(l)
        if self.kind == "binary":
            return (l == 1).astype(float)
        if self.kind == "geometric":
            (q,) = self.args
            lf = l.astype(float)
            return np.where(l >= 1, (1.0 - q) * q ** (lf - 1.0), 0.0)
        p = np.asarray(self.args, dtype=float)
        idx = l - 1
        ok = (idx >= 0) & (idx < p.size)
        out = np.zeros(l.shape, dtype=float)
        out[ok] = p[idx[ok]]
        return out

    @property
    def name(self) -> str:
        if self.kind == "binary":
            return "binary"
        return self.kind + ":" + ",".join(f"{v:g}" for v in self.args)

    @property
    def mean(self) -> float:
        if self.kind == "binary":
            return 1.0
        if self.kind == "geometric":
            return 1.0 / (1.0 - self.args[0])
        p = np.asarray(self.args)
        return float(np.dot(np.arange(1, p.size + 1), p))

    @property
    def variance(self) -> float:
        if self.kind == "binary":
            return 0.0
        if self.kind == "geometric":
            q = self.args[0]
            return q / (1.0 - q) ** 2
        p = np.asarray(self.args)
        l = np.arange(1, p.size + 1)
        return float(np.dot((l - self.mean) ** 2, p))


def binary_law() -> OffspringLaw:
    return OffspringLaw("binary")


def geometric_law(q: float = 0.5) -> OffspringLaw:
    """p_l = (1 - q) q^(l-1), l >= 1."""
    if not 0.0 < q < 1.0:
        raise ValueError("geometric parameter must lie in (0, 1)")
    return OffspringLaw("geometric", (float(q),))


def finite_law(probs: Sequence[float]) -> OffspringLaw:
    """Law with p_l = probs[l-1] on finite support."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.isfinite(p).all():
        raise ValueError("offspring probabilities must be a non-empty non-negative vector")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"offspring probabilities sum to {p.sum()!r}, not 1")
    return OffspringLaw("finite", tuple(float(v) for v in p))


def resolve_law(spec) -> OffspringLaw:
    """Accept an OffspringLaw, a probability vector, or a name like 'geometric:0.5'."""
    if isinstance(spec, OffspringLaw):
        return spec
    if isinstance(spec, str):
        name, _, arg = spec.partition(":")
        name = name.strip().lower()
        if name == "binary":
            return binary_law()
        if name == "geometric":
            return geometric_law(float(arg) if arg else 0.5)
        if name == "finite":
            return finite_law([float(v) for v in arg.split(",")])
        raise ValueError(f"unknown offspring law {spec!r}")
    return finite_law(spec)


def default_truncation(epsilon: float, kappa: float) -> int:
    """L(eps) = ceil(eps^(-kappa/2)) for kappa > 0, ceil(log2(1/eps)) for kappa = 0."""
    if kappa > 0:
        return max(1, math.ceil(epsilon ** (-kappa / 2.0) - 1e-12))
    return max(1, math.ceil(math.log2(1.0 / epsilon) - 1e-12))


@dataclass(frozen=True)
class ModelParams:
    epsilon: float
    kappa: float
    gamma: float
    num_sites: int
    truncation: int
    law: OffspringLaw
    truncated_pmf: np.ndarray = field(repr=False)
    normalizer: float
    truncated_mean: float
    truncated_variance: float
    horizon: float = 1.0

    @property
    def e_kappa(self) -> float:
        """Scale of one particle in X units, eps^kappa."""
        return self.epsilon ** self.kappa

    @property
    def jump_rate(self) -> float:
        return self.epsilon ** -2

    @property
    def mu(self) -> float:
        return self.law.mean

    @property
    def sigma2(self) -> float:
        return self.law.variance

    @property
    def offspring(self) -> np.ndarray:
        return np.arange(1, self.truncation + 1)

    @property
    def field_scale(self) -> float:
        """eps^(1 + gamma - kappa), the prefactor of the fluctuation pairing."""
        return self.epsilon ** (1.0 + self.gamma - self.kappa)

    def sites(self) -> np.ndarray:
        """Points z/K of the unit circle."""
        return np.arange(self.num_sites) / self.num_sites

    def with_horizon(self, T: float) -> "ModelParams":
        return derive_params(self.epsilon, self.kappa, self.gamma, self.law, self.truncation, T)


def derive_params(epsilon: float, kappa: float, gamma: float | None = None,
                  base_pmf="binary", truncation=None, T: float = 1.0) -> ModelParams:
    """Fill K, L, the truncated law and its moments from the scaling inputs.

    ``truncation`` is an int, a callable (eps, kappa) -> int, or None for the
    default rule.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if T <= 0:
        raise ValueError("horizon must be positive")
    law = resolve_law(base_pmf)
    if not math.isfinite(law.mean):
        raise ValueError("offspring law must have finite mean")
    K = int(math.floor(1.0 / epsilon + 1e-9))
    if K < 2:
        raise ValueError("need at least two sites")
    if truncation is None:
        L = default_truncation(epsilon, kappa)
    elif callable(truncation):
        L = int(truncation(epsilon, kappa))
    else:
        L = int(truncation)
    if L < 1:
        raise ValueError("truncation L must be at least 1")
    l = np.arange(1, L + 1)
    head = law.pmf(l)
    mass = math.fsum(head)
    if mass <= 0:
        raise ValueError("offspring law puts no mass on 1..L")
    c = 1.0 / mass
    p = head * c
    mean = math.fsum(l * p)
    var = math.fsum((l - mean) ** 2 * p)
    p.setflags(write=False)
    if gamma is None:
        gamma = (kappa - 1.0) / 2.0
    return ModelParams(float(epsilon), float(kappa), float(gamma), K, L, law, p, c, mean, var, float(T))


# ---------------------------------------------------------------------------
# configurations


@dataclass(frozen=True)
class SiteConfig:
    """Particle counts n(z) on Z_K."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 1 or c.size < 2:
            raise ValueError("counts must be a vector over at least two sites")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def num_sites(self) -> int:
        return int(self.counts.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def scaled(self, params: ModelParams) -> np.ndarray:
        return params.e_kappa * self.counts.astype(np.float64)


@dataclass(frozen=True)
class TestConfig:
    """Finite multiset of sites, stored as site -> multiplicity."""

    num_sites: int
    entries: Mapping[int, int] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        clean = {}
        for z, k in dict(self.entries).items():
            z, k = int(z), int(k)
            if not 0 <= z < self.num_sites:
                raise ValueError(f"site {z} outside Z_{self.num_sites}")
            if k < 1:
                raise ValueError("multiplicities must be at least 1")
            clean[z] = k
        object.__setattr__(self, "entries", dict(sorted(clean.items())))

    @classmethod
    def from_sites(cls, num_sites: int, sites: Sequence[int]) -> "TestConfig":
        entries: dict[int, int] = {}
        for z in sites:
            z = int(z) % num_sites
            entries[z] = entries.get(z, 0) + 1
        return cls(num_sites, entries)

    @property
    def order(self) -> int:
        return sum(self.entries.values())

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(self.entries)

    def sites(self) -> list[int]:
        """Expanded list of particle positions, sorted."""
        return [z for z, k in self.entries.items() for _ in range(k)]

    def multiplicity(self, z: int) -> int:
        return self.entries.get(int(z) % self.num_sites, 0)

    def shifted(self, z: int, h: int) -> "TestConfig | None":
        """x^(z,h): add h particles at z (h >= 0) or remove -h; None if impossible."""
        z = int(z) % self.num_sites
        k = self.multiplicity(z) + h
        if k < 0:
            return None
        e = dict(self.entries)
        if k == 0:
            e.pop(z, None)
        else:
            e[z] = k
        return TestConfig(self.num_sites, e)

    def moved(self, z: int, step: int) -> "TestConfig":
        """Move one particle from z to z + step."""
        e = dict(self.entries)
        e[z] -= 1
        if e[z] == 0:
            del e[z]
        w = (z + step) % self.num_sites
        e[w] = e.get(w, 0) + 1
        return TestConfig(self.num_sites, e)

    def le(self, other) -> bool:
        """Componentwise order against another TestConfig or a SiteConfig."""
        if isinstance(other, SiteConfig):
            if other.num_sites != self.num_sites:
                raise ValueError("lattice size mismatch")
            return all(k <= other.counts[z] for z, k in self.entries.items())
        if other.num_sites != self.num_sites:
            raise ValueError("lattice size mismatch")
        return all(k <= other.multiplicity(z) for z, k in self.entries.items())

    def key(self) -> tuple:
        return tuple(self.entries.items())


def q_eps(x: TestConfig, xp: SiteConfig, params: ModelParams) -> float:
    """prod_z eps^(kappa k_z) Q_{k_z}(n'(z)) over the support of x."""
    if x.num_sites != xp.num_sites or xp.num_sites != params.num_sites:
        raise ValueError("lattice size mismatch")
    out = 1.0
    e = params.e_kappa
    for z, k in x.entries.items():
        out *= e ** k * falling_factorial(k, int(xp.counts[z]))
    return out


@dataclass(frozen=True)
class DensityField:
    """Real values on the K-site grid at one time."""

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("field values must be one-dimensional")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time", float(self.time))

    @property
    def num_sites(self) -> int:
        return int(self.values.size)

    @classmethod
    def constant(cls, K: int, c: float, time: float = 0.0) -> "DensityField":
        return cls(np.full(K, float(c)), time)

    @classmethod
    def from_profile(cls, f, K: int, time: float = 0.0) -> "DensityField":
        """Sample a function of the circle coordinate at z/K."""
        return cls(np.asarray(f(np.arange(K) / K), dtype=float) * np.ones(K), time)
