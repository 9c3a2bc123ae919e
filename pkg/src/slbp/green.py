"""Semi-discrete heat kernel on Z_K and on Z."""

from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
from scipy import integrate, special

from .lattice import TestConfig

__all__ = ["laplacian", "GreenKernel", "green_line", "QuadratureError"]


class QuadratureError(RuntimeError):
    pass


def laplacian(f: np.ndarray, epsilon: float) -> np.ndarray:
    """eps^-2 (f(z+1) + f(z-1) - 2 f(z)) on the circle (last axis)."""
    f = np.asarray(f, dtype=np.float64)
    return (np.roll(f, -1, axis=-1) + np.roll(f, 1, axis=-1) - 2.0 * f) / epsilon ** 2


class GreenKernel:
    """Transition kernel of the walk jumping at rate eps^-2 on Z_K."""

    def __init__(self, K: int, epsilon: float):
        if K < 2:
            raise ValueError("need at least two sites")
        self.K = int(K)
        self.epsilon = float(epsilon)
        j = np.arange(self.K)
        self.eigenvalues = (1.0 - np.cos(2.0 * np.pi * j / self.K)) / self.epsilon ** 2

    def _weights(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("time must be non-negative")
        return np.exp(-t * self.eigenvalues)

    def green(self, t: float, z1, z2):
        """G_t(z1, z2), solving d/dt G = (1/2) Lap G with G_0 = identity."""
        d = (np.asarray(z2) - np.asarray(z1)) % self.K
        w = self._weights(t)
        j = np.arange(self.K)
        phase = np.cos(2.0 * np.pi * np.multiply.outer(d, j) / self.K)
        return phase @ w / self.K

    def row(self, t: float) -> np.ndarray:
        """G_t(0, z) for z = 0..K-1."""
        return np.real(np.fft.ifft(self._weights(t)))

    def matrix(self, t: float) -> np.ndarray:
        r = self.row(t)
        idx = (np.arange(self.K)[None, :] - np.arange(self.K)[:, None]) % self.K
        return r[idx]

    def apply(self, t: float, f: np.ndarray) -> np.ndarray:
        """sum_z2 G_t(z, z2) f(z2), via the spectral multiplier."""
        f = np.asarray(f, dtype=np.float64)
        return np.real(np.fft.ifft(np.fft.fft(f, axis=-1) * self._weights(t), axis=-1))

    def multi(self, t: float, x: TestConfig, xp: TestConfig) -> float:
        """(1/n!) sum over bijections sigma of prod_i G_t(x_i, xp_sigma(i))."""
        a, b = x.sites(), xp.sites()
        if len(a) != len(b):
            raise ValueError("configurations must have equal order")
        n = len(a)
        if n > 4:
            raise ValueError("order above 4 not supported")
        if n == 0:
            return 1.0
        G = self.matrix(t)
        total = 0.0
        for perm in itertools.permutations(range(n)):
            p = 1.0
            for i in range(n):
                p *= G[a[i] % self.K, b[perm[i]] % self.K]
            total += p
        return total / math.factorial(n)


def green_line(t: float, z, epsilon: float, method: str = "bessel"):
    """Kernel of the same walk on Z: e^{-t/eps^2} I_z(t/eps^2)."""
    if t < 0:
        raise ValueError("time must be non-negative")
    a = t / epsilon ** 2
    z = np.abs(np.asarray(z))
    if method == "bessel":
        if a == 0:
            return (z == 0).astype(float)
        return special.ive(z, a)
    if method != "quad":
        raise ValueError(f"unknown method {method!r}")

    def one(zz):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(lambda th: np.cos(zz * th) * np.exp(-a * (1.0 - np.cos(th))),
                                          0.0, np.pi, limit=400, epsabs=1e-15, epsrel=1e-12)
            except integrate.IntegrationWarning as w:
                raise QuadratureError(str(w)) from None
        return val / np.pi

    return np.vectorize(one, otypes=[float])(z)
