"""Prior distributions for hazard-model parameters.

Every prior exposes ``logpdf`` and ``dlogpdf`` (derivative with respect to the
argument) that broadcast over numpy arrays, so they can be evaluated for a
batch of MCMC chains at once.  Out-of-support values give ``-inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import special

__all__ = ["Normal", "Exponential", "Beta", "Flat", "RandomWalk1", "parse_prior", "prior_to_config"]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError(f"Normal sd must be positive, got {self.sd}")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - _LOG_SQRT_2PI

    def dlogpdf(self, x):
        return -(np.asarray(x, dtype=float) - self.mean) / self.sd**2


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"Exponential rate must be positive, got {self.rate}")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            return np.where(x > 0, math.log(self.rate) - self.rate * x, -np.inf)

    def dlogpdf(self, x):
        return np.full_like(np.asarray(x, dtype=float), -self.rate)


@dataclass(frozen=True)
class Beta:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.a}, {self.b})")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > 0) & (x < 1)
        xc = np.clip(x, 1e-300, 1 - 1e-16)
        val = ((self.a - 1) * np.log(xc) + (self.b - 1) * np.log1p(-xc)
               - special.betaln(self.a, self.b))
        return np.where(inside, val, -np.inf)

    def dlogpdf(self, x):
        x = np.asarray(x, dtype=float)
        return (self.a - 1) / x - (self.b - 1) / (1 - x)

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    def sample(self, rng, size=None):
        return rng.beta(self.a, self.b, size=size)


@dataclass(frozen=True)
class Flat:
    """Improper uniform prior on the real line."""

    def logpdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def dlogpdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class RandomWalk1:
    """First-order random walk on a sequence of levels.

    ``levels[0] ~ first``; ``levels[l] - levels[l-1] ~ Normal(0, tau)``;
    ``tau ~ Exponential(tau_rate)``.
    """

    first: Normal
    tau_rate: float = 1.0

    def __post_init__(self):
        if not self.tau_rate > 0:
            raise ValueError("RandomWalk1 tau_rate must be positive")

    def logpdf(self, levels, tau):
        """Joint log density of ``levels`` (..., L) and ``tau`` (...)."""
        levels = np.asarray(levels, dtype=float)
        tau = np.asarray(tau, dtype=float)
        out = self.first.logpdf(levels[..., 0])
        diffs = np.diff(levels, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            safe_tau = np.where(tau > 0, tau, 1.0)
            z = diffs / safe_tau[..., None]
            rw = (-0.5 * z * z).sum(-1) - diffs.shape[-1] * (np.log(safe_tau) + _LOG_SQRT_2PI)
        out = out + np.where(tau > 0, rw, -np.inf)
        return out + Exponential(self.tau_rate).logpdf(tau)

    def dlogpdf(self, levels, tau):
        """Gradients (d/dlevels, d/dtau) of :meth:`logpdf`."""
        levels = np.asarray(levels, dtype=float)
        tau = np.asarray(tau, dtype=float)
        diffs = np.diff(levels, axis=-1)
        t2 = tau[..., None] ** 2
        g = np.zeros_like(levels)
        g[..., 0] = self.first.dlogpdf(levels[..., 0])
        g[..., 1:] -= diffs / t2
        g[..., :-1] += diffs / t2
        n = diffs.shape[-1]
        gtau = (diffs**2).sum(-1) / tau**3 - n / tau - self.tau_rate
        return g, gtau


def parse_prior(obj):
    """Build a prior from its config form.

    Accepted forms: ``{"normal": [mean, sd]}``, ``{"exponential": rate}``,
    ``{"beta": [a, b]}``, ``"flat"`` and
    ``{"random_walk": {"first": [mean, sd], "tau_rate": rate}}``.
    Prior objects pass through unchanged.
    """
    if isinstance(obj, (Normal, Exponential, Beta, Flat, RandomWalk1)):
        return obj
    if obj == "flat" or obj == {"flat": None}:
        return Flat()
    if not isinstance(obj, Mapping) or len(obj) != 1:
        raise ValueError(f"cannot parse prior {obj!r}")
    (kind, arg), = obj.items()
    kind = kind.lower()
    if kind == "normal":
        return Normal(float(arg[0]), float(arg[1]))
    if kind == "exponential":
        return Exponential(float(arg))
    if kind == "beta":
        return Beta(float(arg[0]), float(arg[1]))
    if kind == "flat":
        return Flat()
    if kind == "random_walk":
        first = arg.get("first", [0.0, 1.0])
        return RandomWalk1(Normal(float(first[0]), float(first[1])), float(arg.get("tau_rate", 1.0)))
    raise ValueError(f"unknown prior kind {kind!r}")


def prior_to_config(p):
    if isinstance(p, Normal):
        return {"normal": [p.mean, p.sd]}
    if isinstance(p, Exponential):
        return {"exponential": p.rate}
    if isinstance(p, Beta):
        return {"beta": [p.a, p.b]}
    if isinstance(p, Flat):
        return "flat"
    if isinstance(p, RandomWalk1):
        return {"random_walk": {"first": [p.first.mean, p.first.sd], "tau_rate": p.tau_rate}}
    raise TypeError(p)
