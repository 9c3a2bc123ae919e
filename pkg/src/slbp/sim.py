"""Exact simulation of the rescaled process and replica ensembles."""

from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernel
from .lattice import DensityField, ModelParams, SiteConfig

__all__ = [
    "SimulationError",
    "ReplicaError",
    "site_rates",
    "alias_table",
    "sample_initial",
    "Trajectory",
    "simulate",
    "replica_rng",
    "run_replicas",
    "EnsembleStats",
    "summarize",
    "ensemble",
]

# total particle count above which n(n-1)/2 sums could leave int64
MAX_TOTAL = 2 ** 31


class SimulationError(RuntimeError):
    pass


class ReplicaError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"replica {index} failed: {cause!r}")
        self.index = index
        self.cause = cause


def site_rates(n: int, params: ModelParams) -> tuple[float, float, float]:
    """(jump, branch, coalesce) rates of a site holding n particles."""
    if n < 0:
        raise ValueError("count must be non-negative")
    return n * params.jump_rate, float(n), params.e_kappa * n * (n - 1) / 2.0


def alias_table(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias table for sampling index j with probability p[j]."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    scaled = p * n / p.sum()
    prob = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = [j for j in range(n) if scaled[j] < 1.0]
    large = [j for j in range(n) if scaled[j] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = scaled[g] + scaled[s] - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    for j in small + large:
        prob[j] = 1.0
    return prob, alias


def _as_values(field_or_values, K: int) -> np.ndarray:
    v = field_or_values.values if isinstance(field_or_values, DensityField) else field_or_values
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (K,):
        raise ValueError(f"expected a field on {K} sites, got shape {v.shape}")
    return v


def sample_initial(rho0_field, params: ModelParams, rng: np.random.Generator) -> SiteConfig:
    """Independent Poisson(eps^-kappa rho0(z)) counts."""
    rho = _as_values(rho0_field, params.num_sites)
    if np.any(rho < 0) or not np.isfinite(rho).all():
        raise ValueError("initial intensity must be finite and non-negative")
    return SiteConfig(rng.poisson(rho / params.e_kappa))


@dataclass
class Trajectory:
    """Snapshots at the observation times and per-bin exact time integrals.

    integrals[b, k-1, z] is the integral of n(z)^k over [times[b], times[b+1]].
    """

    times: np.ndarray
    snapshots: np.ndarray
    event_count: int
    integrals: np.ndarray | None = None
    audit_error: float = 0.0
    event_log: dict | None = None

    def scaled(self, params: ModelParams) -> np.ndarray:
        return params.e_kappa * self.snapshots.astype(np.float64)

    def config(self, i: int) -> SiteConfig:
        return SiteConfig(self.snapshots[i])

    def bin_integral(self, coeffs: Sequence[float]) -> np.ndarray:
        """Integral of sum_k coeffs[k] n(z)^k over each bin, shape (bins, K)."""
        if self.integrals is None:
            raise ValueError("trajectory was run without time integrals")
        D = self.integrals.shape[1]
        if len(coeffs) - 1 > D:
            raise ValueError(f"only moments up to degree {D} were integrated")
        widths = np.diff(self.times)[:, None]
        out = coeffs[0] * np.broadcast_to(widths, self.integrals[:, 0, :].shape).copy()
        for k in range(1, len(coeffs)):
            if coeffs[k] != 0:
                out += coeffs[k] * self.integrals[:, k - 1, :]
        return out


def simulate(x0: SiteConfig, params: ModelParams, observe_times: Sequence[float],
             rng: np.random.Generator, moments: int = 0, jump_scale: float = 1.0,
             coalescence_scale: float = 1.0, log_capacity: int = 0,
             audit_every: int = 0, method: str = "particles") -> Trajectory:
    """Run the exact next-event chain from x0 and observe it at observe_times.

    ``moments`` = D requests exact bin integrals of n^1..n^D.  The two scale
    factors switch individual mechanisms off for testing.  ``method`` picks
    the kernel: "particles" (flat particle array, O(1) jumps) or "fenwick"
    (weighted site index, O(log K) per event).  Both sample the same chain.
    """
    times = np.asarray(observe_times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("need at least one observation time")
    if np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("observation times must be non-negative and strictly increasing")
    if times[-1] > params.horizon + 1e-12:
        raise ValueError("observation time beyond the model horizon")
    if x0.num_sites != params.num_sites:
        raise ValueError("lattice size mismatch")
    if moments < 0 or moments > 4:
        raise ValueError("moments must lie in 0..4")
    counts = np.array(x0.counts, dtype=np.int64)
    K = counts.size
    nt = times.size
    snaps = np.empty((nt, K), dtype=np.int64)
    integ = np.zeros((max(nt - 1, 0), max(moments, 1), K))
    prob, alias = _alias_cache(params)
    log_t = np.empty(log_capacity)
    log_site = np.empty(log_capacity, dtype=np.int64)
    log_kind = np.empty(log_capacity, dtype=np.int8)
    log_ell = np.empty(log_capacity, dtype=np.int64)
    if method not in _KERNELS:
        raise ValueError(f"unknown kernel {method!r}")
    events, status, audit = _KERNELS[method](
        counts, params.jump_rate * jump_scale, params.e_kappa * coalescence_scale,
        prob, alias, times, moments, snaps, integ, rng, MAX_TOTAL, audit_every,
        log_t, log_site, log_kind, log_ell)
    if status == _kernel.OVERFLOW:
        raise SimulationError(f"particle count exceeded {MAX_TOTAL} after {events} events")
    if status == _kernel.LOG_FULL:
        raise SimulationError(f"event log capacity {log_capacity} exhausted")
    log = None
    if log_capacity:
        log = {"time": log_t[:events], "site": log_site[:events],
               "kind": log_kind[:events], "offspring": log_ell[:events]}
    return Trajectory(times, snaps, int(events), integ if moments else None, float(audit), log)


_ALIAS: dict = {}
_KERNELS = {"particles": _kernel.run_particles, "fenwick": _kernel.run}


def _alias_cache(params: ModelParams):
    key = params.truncated_pmf.tobytes()
    if key not in _ALIAS:
        _ALIAS[key] = alias_table(params.truncated_pmf)
    return _ALIAS[key]


# ---------------------------------------------------------------------------
# replicas


def replica_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream owned by one replica."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), int(index)])))


def _run_chunk(worker, master_seed, lo, hi):
    out = []
    for i in range(lo, hi):
        try:
            out.append(np.asarray(worker(i, replica_rng(master_seed, i)), dtype=np.float64))
        except Exception as exc:  # surfaced with the replica index
            raise ReplicaError(i, exc) from exc
    return np.stack(out)


def run_replicas(worker: Callable[[int, np.random.Generator], np.ndarray], R: int,
                 master_seed: int, jobs: int = 1, first: int = 0) -> np.ndarray:
    """Evaluate worker(i, rng_i) for i in first..first+R-1, stacked in index order.

    Each replica draws only from its own stream, so the result does not
    depend on ``jobs``.
    """
    if R < 1:
        raise ValueError("need at least one replica")
    jobs = max(1, int(jobs))
    if jobs == 1 or R < 2:
        return _run_chunk(worker, master_seed, first, first + R)
    nchunk = min(R, 4 * jobs)
    edges = np.linspace(first, first + R, nchunk + 1).astype(int)
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        futs = [pool.submit(_run_chunk, worker, master_seed, int(a), int(b))
                for a, b in zip(edges[:-1], edges[1:]) if b > a]
        parts = [f.result() for f in futs]
    return np.concatenate(parts, axis=0)


@dataclass
class EnsembleStats:
    observable: str
    replicas: int
    mean: np.ndarray | float
    stderr: np.ndarray | float
    master_seed: int
    replica_keys: tuple = field(repr=False, default=())


def summarize(values: np.ndarray, observable: str, master_seed: int, first: int = 0) -> EnsembleStats:
    """Mean and standard error along axis 0 (numpy pairwise summation)."""
    values = np.asarray(values, dtype=np.float64)
    R = values.shape[0]
    if R < 2:
        raise ValueError("need at least two replicas")
    mean = values.mean(axis=0)
    stderr = values.std(axis=0, ddof=1) / np.sqrt(R)
    if np.ndim(mean) == 0:
        mean, stderr = float(mean), float(stderr)
    keys = tuple((int(master_seed), i) for i in range(first, first + R))
    return EnsembleStats(observable, R, mean, stderr, int(master_seed), keys)


@dataclass
class _EnsembleWorker:
    params: ModelParams
    rho0: np.ndarray
    times: np.ndarray
    observable: Callable
    moments: int = 0
    initial: str = "poisson"

    def __call__(self, index, rng):
        if self.initial == "poisson":
            x0 = sample_initial(self.rho0, self.params, rng)
        else:
            x0 = SiteConfig(np.rint(self.rho0 / self.params.e_kappa).astype(np.int64))
        traj = simulate(x0, self.params, self.times, rng, moments=self.moments)
        return self.observable(traj, self.params)


def ensemble(params: ModelParams, rho0_field, observable: Callable, R: int, master_seed: int,
             observe_times: Sequence[float] | None = None, jobs: int = 1, moments: int = 0,
             initial: str = "poisson", name: str | None = None) -> EnsembleStats:
    """R replicas from product-Poisson (or rounded deterministic) initial data.

    observable(trajectory, params) returns a float or a fixed-shape array.
    """
    if R < 2:
        raise ValueError("need at least two replicas")
    if initial not in ("poisson", "deterministic"):
        raise ValueError("initial must be 'poisson' or 'deterministic'")
    times = np.asarray([params.horizon] if observe_times is None else observe_times, dtype=float)
    worker = _EnsembleWorker(params, _as_values(rho0_field, params.num_sites), times,
                             observable, moments, initial)
    values = run_replicas(worker, R, master_seed, jobs)
    return summarize(values, name or getattr(observable, "__name__", "observable"), master_seed)


def default_jobs() -> int:
    return os.cpu_count() or 1
