"""Posterior fitting of cause-specific hazard strata.

Because the cause-specific likelihood factorises over (cause, arm) strata and
priors are independent across strata, each stratum is fitted on its own.

Sampling scale
    Weibull: ``(alpha + gamma'zbar + nu*c, gamma, log nu)`` where ``zbar`` is
    the covariate mean and ``c`` the mean log event time; PCH:
    ``(beta_l + gamma'zbar, gamma, log tau)``.  Both shifts have unit
    Jacobian; the log transforms add ``log nu`` / ``log tau``.

Chains are started near a posterior mode found with L-BFGS using analytic
gradients, and the inverse Hessian there seeds the proposal covariance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from . import rng as rngmod
from .dataset import CompetingRiskDataset
from .hazards import (CAUSES, CauseModelSet, ModelError, PchCsModel, PchPriors, WeibullCsModel,
                      WeibullPriors)
from .priors import RandomWalk1
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, sample_posterior

__all__ = ["StratumSpec", "StratumPosterior", "StratumFit", "FittedModel", "fit_stratum", "fit_models",
           "find_mode", "ConvergenceError"]

log = logging.getLogger(__name__)

# intervals with fewer events than this get non-centred random-walk steps
NONCENTERED_MIN_EVENTS = 25
MAX_AUTO_THIN = 4
PILOT_ITERATIONS = 400


class ConvergenceError(RuntimeError):
    """Posterior diagnostics outside the configured thresholds."""

    def __init__(self, message, flagged=None):
        super().__init__(message)
        self.flagged = flagged or {}


@dataclass(frozen=True)
class StratumSpec:
    """Model family, covariates and priors for one stratum.

    ``arm=None`` fits one model over both arms; include ``"arm"`` in
    ``covariates`` to give it a proportional-hazards arm coefficient.
    """

    cause: int
    arm: int | None
    family: str = "weibull"
    covariates: tuple = ()
    knots: tuple = ()
    priors: object = None

    def __post_init__(self):
        if self.cause not in CAUSES:
            raise ModelError(f"cause must be 1 or 2, got {self.cause}")
        if self.arm not in (0, 1, None):
            raise ModelError(f"arm must be 0, 1 or None, got {self.arm}")
        if self.family not in ("weibull", "pch"):
            raise ModelError(f"unknown family {self.family!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if self.priors is None:
            object.__setattr__(self, "priors", WeibullPriors() if self.family == "weibull" else PchPriors())
        if self.family == "weibull" and not isinstance(self.priors, WeibullPriors):
            raise ModelError("Weibull stratum needs WeibullPriors")
        if self.family == "pch" and not isinstance(self.priors, PchPriors):
            raise ModelError("PCH stratum needs PchPriors")
        if self.arm is not None and "arm" in self.covariates:
            raise ModelError("an arm-specific stratum cannot use 'arm' as a covariate")
        if self.family == "pch":
            PchCsModel(self.knots, [0.0] * (len(self.knots) + 1))  # validates knots

    @property
    def key(self):
        return (self.cause, self.arm)

    @property
    def label(self) -> str:
        return f"cause{self.cause}" + ("" if self.arm is None else f"_arm{self.arm}")

    @property
    def hierarchical(self) -> bool:
        return self.family == "pch" and isinstance(self.priors.levels, RandomWalk1)

    @property
    def n_levels(self) -> int:
        return len(self.knots) + 1

    def coef_name(self, cov: str) -> str:
        return "beta_arm" if cov == "arm" else f"gamma[{cov}]"

    @property
    def param_names(self) -> tuple:
        coefs = [self.coef_name(c) for c in self.covariates]
        if self.family == "weibull":
            return ("alpha", *coefs, "nu")
        names = [f"level[{l + 1}]" for l in range(self.n_levels)] + coefs
        if self.hierarchical:
            names.append("tau")
        return tuple(names)

    def model_from_row(self, row) -> WeibullCsModel | PchCsModel:
        """Hazard model at one natural-scale parameter vector."""
        row = np.asarray(row, dtype=float)
        p = len(self.covariates)
        if self.family == "weibull":
            return WeibullCsModel(row[0], row[1 + p], tuple(row[1:1 + p]), self.covariates)
        L = self.n_levels
        return PchCsModel(self.knots, tuple(row[:L]), tuple(row[L:L + p]), self.covariates)

    def hyper_from_row(self, row):
        return float(row[-1]) if self.hierarchical else None


class StratumPosterior:
    """Log posterior of one stratum on the sampling scale, batched over chains."""

    def __init__(self, spec: StratumSpec, data: CompetingRiskDataset, noncentered=None):
        self.spec = spec
        self._noncentered_arg = noncentered
        if spec.arm is not None:
            data = data.subset(data.arm == spec.arm)
        if len(data) == 0:
            raise ModelError(f"no subjects in stratum {spec.label}")
        self.n = len(data)
        y = data.time
        d = (data.event == spec.cause)
        if np.any(d & (y <= 0)):
            raise ModelError(f"{spec.label}: event at time 0 has zero likelihood")
        Z = data.design(spec.covariates)
        self.p = Z.shape[1]
        self.zbar = Z.mean(axis=0) if self.p else np.zeros(0)
        self.n_events = int(d.sum())
        self.names = spec.param_names
        self.dim = len(self.names)
        self._coef_priors = [spec.priors.coef(c) for c in spec.covariates]
        if spec.family == "weibull":
            pos = y > 0
            self.logy = np.log(y[pos])
            self.Z = Z[pos]
            self.ZD_sum = Z[d].sum(axis=0)
            self.logyD_sum = float(np.log(y[d]).sum())
            self.c = float(np.log(y[d]).mean()) if self.n_events else 0.0
            self.total_time = float(y.sum())
        else:
            model = PchCsModel(spec.knots, [0.0] * spec.n_levels)
            E = model.exposures(y)
            D = np.zeros_like(E)
            if self.n_events:
                np.add.at(D, (np.flatnonzero(d), model.interval(y[d])), 1.0)
            if self.p:
                patterns, inv = np.unique(Z, axis=0, return_inverse=True)
                inv = inv.reshape(-1)
            else:
                patterns, inv = np.zeros((1, 0)), np.zeros(len(y), dtype=int)
            G = len(patterns)
            self.patterns = patterns
            self.E = np.zeros((G, spec.n_levels))
            self.D = np.zeros((G, spec.n_levels))
            np.add.at(self.E, inv, E)
            np.add.at(self.D, inv, D)
            self.D_level = self.D.sum(axis=0)
            self.DZ_sum = self.D.sum(axis=1) @ patterns if self.p else np.zeros(0)
        self.nc = self._increment_mask(self._noncentered_arg)

    def _increment_mask(self, arg):
        """Which random-walk increments are sampled as standardised steps.

        Level ``l`` is sampled directly when its interval holds enough events
        to pin it down; otherwise as ``(level_l - level_{l-1}) / tau``, which
        removes the funnel between tau and data-poor levels.
        """
        if not self.spec.hierarchical:
            return np.zeros(max(self.spec.n_levels, 1), dtype=bool)
        L = self.spec.n_levels
        if arg is None:
            mask = self.D_level < NONCENTERED_MIN_EVENTS
        else:
            mask = np.asarray(np.broadcast_to(arg, (L,)), dtype=bool).copy()
        mask[0] = False
        return mask

    @property
    def noncentered(self) -> bool:
        return bool(self.nc.any())

    # -- parameter maps --------------------------------------------------------

    def to_natural(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        out = U.copy()
        p = self.p
        if self.spec.family == "weibull":
            gamma = U[:, 1:1 + p]
            nu = np.exp(U[:, 1 + p])
            out[:, 0] = U[:, 0] - gamma @ self.zbar - nu * self.c
            out[:, 1 + p] = nu
        else:
            L = self.spec.n_levels
            gamma = U[:, L:L + p]
            if self.noncentered:
                tau = np.exp(U[:, -1])
                for l in np.flatnonzero(self.nc):
                    out[:, l] = out[:, l - 1] + tau * U[:, l]
            out[:, :L] = out[:, :L] - (gamma @ self.zbar)[:, None]
            if self.spec.hierarchical:
                out[:, -1] = np.exp(U[:, -1])
        return out

    def to_sampling(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = X.copy()
        p = self.p
        if self.spec.family == "weibull":
            gamma = X[:, 1:1 + p]
            nu = X[:, 1 + p]
            out[:, 0] = X[:, 0] + gamma @ self.zbar + nu * self.c
            out[:, 1 + p] = np.log(nu)
        else:
            L = self.spec.n_levels
            gamma = X[:, L:L + p]
            out[:, :L] = X[:, :L] + (gamma @ self.zbar)[:, None]
            if self.noncentered:
                steps = np.diff(X[:, :L], axis=1) / X[:, -1:]
                out[:, 1:L] = np.where(self.nc[1:], steps, out[:, 1:L])
            if self.spec.hierarchical:
                out[:, -1] = np.log(X[:, -1])
        return out

    # -- densities on the natural scale ------------------------------------------

    def log_likelihood_natural(self, X):
        """Batched cause-specific log-likelihood, X of shape (m, dim)."""
        X = np.atleast_2d(X)
        p = self.p
        if self.spec.family == "weibull":
            alpha, gamma, nu = X[:, 0], X[:, 1:1 + p], X[:, 1 + p]
            eta = alpha[:, None] + gamma @ self.Z.T if p else np.broadcast_to(alpha[:, None], (len(X), len(self.logy)))
            with np.errstate(over="ignore"):
                cum = np.exp(eta + nu[:, None] * self.logy[None, :]).sum(axis=1)
            ev = (self.n_events * (alpha + np.log(nu)) + gamma @ self.ZD_sum
                  + (nu - 1.0) * self.logyD_sum)
            return ev - cum
        L = self.spec.n_levels
        beta, gamma = X[:, :L], X[:, L:L + p]
        eta = gamma @ self.patterns.T  # (m, G)
        with np.errstate(over="ignore"):
            cum = (np.exp(beta) @ self.E.T * np.exp(eta)).sum(axis=1)
        ev = beta @ self.D_level + gamma @ self.DZ_sum
        return ev - cum

    def log_prior_natural(self, X):
        X = np.atleast_2d(X)
        pr = self.spec.priors
        p = self.p
        if self.spec.family == "weibull":
            out = pr.intercept.logpdf(X[:, 0]) + pr.shape.logpdf(X[:, 1 + p])
            coefs = X[:, 1:1 + p]
        else:
            L = self.spec.n_levels
            if self.spec.hierarchical:
                out = pr.levels.logpdf(X[:, :L], X[:, -1])
            else:
                out = pr.levels.logpdf(X[:, :L]).sum(axis=1)
            coefs = X[:, L:L + p]
        for j, prior in enumerate(self._coef_priors):
            out = out + prior.logpdf(coefs[:, j])
        return out

    def _log_jacobian(self, U):
        if self.spec.family == "weibull":
            return U[:, 1 + self.p]
        if self.noncentered:
            return (1 + self.nc.sum()) * U[:, -1]
        if self.spec.hierarchical:
            return U[:, -1]
        return np.zeros(len(U))

    def log_density(self, U):
        """Log posterior (up to a constant) on the sampling scale, U of shape (m, dim)."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        X = self.to_natural(U)
        with np.errstate(invalid="ignore", over="ignore"):
            val = self.log_likelihood_natural(X) + self.log_prior_natural(X) + self._log_jacobian(U)
        return np.where(np.isfinite(val), val, -np.inf)

    # -- gradients ------------------------------------------------------------------

    def grad_natural(self, x, include_prior=True):
        """Gradient of log-likelihood (+ log prior) at one natural-scale vector."""
        x = np.asarray(x, dtype=float)
        p = self.p
        pr = self.spec.priors
        g = np.zeros(self.dim)
        if self.spec.family == "weibull":
            alpha, gamma, nu = x[0], x[1:1 + p], x[1 + p]
            w = np.exp(alpha + self.Z @ gamma + nu * self.logy) if len(self.logy) else np.zeros(0)
            g[0] = self.n_events - w.sum()
            g[1:1 + p] = self.ZD_sum - w @ self.Z
            g[1 + p] = self.n_events / nu + self.logyD_sum - w @ self.logy
            if include_prior:
                g[0] += pr.intercept.dlogpdf(alpha)
                g[1 + p] += pr.shape.dlogpdf(nu)
                for j, prior in enumerate(self._coef_priors):
                    g[1 + j] += prior.dlogpdf(gamma[j])
            return g
        L = self.spec.n_levels
        beta, gamma = x[:L], x[L:L + p]
        eg = np.exp(self.patterns @ gamma)  # (G,)
        W = np.exp(beta)[None, :] * self.E * eg[:, None]  # (G, L)
        g[:L] = self.D_level - W.sum(axis=0)
        g[L:L + p] = self.DZ_sum - W.sum(axis=1) @ self.patterns
        if include_prior:
            if self.spec.hierarchical:
                gl, gt = pr.levels.dlogpdf(beta, np.asarray(x[-1]))
                g[:L] += gl
                g[-1] += gt
            else:
                g[:L] += pr.levels.dlogpdf(beta)
            for j, prior in enumerate(self._coef_priors):
                g[L + j] += prior.dlogpdf(gamma[j])
        return g

    def grad(self, u):
        """Gradient of :meth:`log_density` at one sampling-scale vector."""
        u = np.asarray(u, dtype=float)
        x = self.to_natural(u[None, :])[0]
        gn = self.grad_natural(x)
        p = self.p
        gu = gn.copy()
        if self.spec.family == "weibull":
            nu = x[1 + p]
            gu[1:1 + p] = gn[1:1 + p] - self.zbar * gn[0]
            gu[1 + p] = nu * (gn[1 + p] - self.c * gn[0]) + 1.0
        else:
            L = self.spec.n_levels
            gb = gn[:L]
            gu[L:L + p] = gn[L:L + p] - self.zbar * gb.sum()
            if self.noncentered:
                tau = x[-1]
                acc = np.empty(L)
                acc[L - 1] = gb[L - 1]
                for l in range(L - 2, -1, -1):
                    acc[l] = gb[l] + (acc[l + 1] if self.nc[l + 1] else 0.0)
                gu[:L] = np.where(self.nc, tau * acc, acc)
                sens = np.zeros(L)
                steps = np.diff(x[:L])
                for l in range(1, L):
                    if self.nc[l]:
                        sens[l] = sens[l - 1] + steps[l - 1]
                gu[-1] = tau * gn[-1] + gb @ sens + 1 + self.nc.sum()
            elif self.spec.hierarchical:
                gu[-1] = x[-1] * gn[-1] + 1.0
        return gu

    # -- starting values ------------------------------------------------------------

    def crude_init(self) -> np.ndarray:
        """Constant-hazard starting point on the sampling scale."""
        x = np.zeros(self.dim)
        if self.spec.family == "weibull":
            rate = max(self.n_events, 0.5) / max(self.total_time, 1e-12)
            x[0] = math.log(rate)
            x[1 + self.p] = 1.0
        else:
            L = self.spec.n_levels
            tot_e = self.E.sum()
            rate = max(self.D.sum(), 0.5) / max(tot_e, 1e-12)
            x[:L] = math.log(rate)
            if self.spec.hierarchical:
                x[-1] = 0.5
        return self.to_sampling(x)[0]


def _neg_curvature(prior, x, h=1e-4):
    """-d2/dx2 log prior, by central differences of the analytic derivative."""
    return -(prior.dlogpdf(x + h) - prior.dlogpdf(x - h)) / (2 * h)


class _HierarchicalMoves:
    """Extra updates for piecewise-constant strata with a random-walk prior.

    Each iteration runs

    * a Newton-proposal update of levels and coefficients given ``tau``:
      ``N(x + H^{-1} g, H^{-1})`` with ``g``, ``H`` the gradient and
      negative Hessian of the conditional log posterior at the current
      point.  The conditional is close to Gaussian, so acceptance is high
      at any ``tau``, which the global proposal cannot manage in the neck
      of the funnel;
    * a Metropolis step on ``log tau`` holding the levels fixed; and
    * one holding the standardised increments fixed.  The two ``tau`` steps
      cover the data-rich and data-poor regimes respectively.
    """

    def __init__(self, target: StratumPosterior, n_chains: int):
        self.target = target
        L = target.spec.n_levels
        self.L = L
        self.k = L + target.p
        self.log_s = np.full((2, n_chains), math.log(1.7 / math.sqrt(max(L - 1, 1))))
        self.count = 0
        Dm = np.diff(np.eye(L), axis=0)
        self.Q = Dm.T @ Dm

    def _adapt(self, k, ratio):
        gain = 1.0 / (self.count + 10.0) ** 0.6
        self.log_s[k] += gain * (np.exp(np.minimum(ratio, 0.0)) - 0.44) * 2.0

    def _newton(self, X):
        """Newton mean and Cholesky factor of the negative Hessian, batched."""
        t = self.target
        L, p, k = self.L, t.p, self.k
        beta, gamma, tau = X[:, :L], X[:, L:L + p], X[:, -1]
        levels = t.spec.priors.levels
        with np.errstate(over="ignore"):
            W = np.exp(beta)[:, None, :] * t.E[None] * np.exp(gamma @ t.patterns.T)[:, :, None]  # (m, G, L)
        Wl = W.sum(axis=1)
        Wg = W.sum(axis=2)
        g = np.empty((len(X), k))
        gb, _ = levels.dlogpdf(beta, tau)
        g[:, :L] = t.D_level - Wl + gb
        H = np.zeros((len(X), k, k))
        H[:, :L, :L] = self.Q[None] / (tau**2)[:, None, None]
        H[:, np.arange(L), np.arange(L)] += Wl
        H[:, 0, 0] += _neg_curvature(levels.first, beta[:, 0])
        if p:
            g[:, L:] = t.DZ_sum - Wg @ t.patterns
            cross = np.einsum("mgl,gj->mlj", W, t.patterns)
            H[:, :L, L:] = cross
            H[:, L:, :L] = cross.transpose(0, 2, 1)
            H[:, L:, L:] = np.einsum("mg,gi,gj->mij", Wg, t.patterns, t.patterns)
            for j, prior in enumerate(t._coef_priors):
                g[:, L + j] += prior.dlogpdf(gamma[:, j])
                H[:, L + j, L + j] += _neg_curvature(prior, gamma[:, j])
        C = np.linalg.cholesky(H)
        step = np.linalg.solve(H, g[..., None])[..., 0]
        return X[:, :k] + step, C

    @staticmethod
    def _logq(x, mean, C):
        r = np.einsum("mji,mj->mi", C, x - mean)  # C^T (x - mean)
        return np.log(np.diagonal(C, axis1=1, axis2=2)).sum(axis=1) - 0.5 * (r * r).sum(axis=1)

    def _block(self, X, rng):
        t = self.target
        m, k = len(X), self.k
        z = rng.standard_normal((m, k))
        logu = np.log(rng.random(m))
        try:
            mean, C = self._newton(X)
        except np.linalg.LinAlgError:
            return X, np.zeros(m, dtype=bool)
        ok = np.all(np.isfinite(mean), axis=1)
        # x' = mean + C^{-T} z
        Y = X.copy()
        Y[:, :k] = mean + np.linalg.solve(C.transpose(0, 2, 1), z[..., None])[..., 0]
        Y[~ok] = X[~ok]
        try:
            mean_b, C_b = self._newton(Y)
        except np.linalg.LinAlgError:
            return X, np.zeros(m, dtype=bool)
        with np.errstate(invalid="ignore", over="ignore"):
            cur = t.log_likelihood_natural(X) + t.log_prior_natural(X)
            prop = t.log_likelihood_natural(Y) + t.log_prior_natural(Y)
            ratio = prop - cur + self._logq(X[:, :k], mean_b, C_b) - self._logq(Y[:, :k], mean, C)
        ratio = np.where(np.isfinite(ratio) & ok, ratio, -np.inf)
        acc = logu < ratio
        X = np.where(acc[:, None], Y, X)
        return X, acc

    def __call__(self, U, lp, rng, warm):
        t = self.target
        L = self.L
        X = t.to_natural(U)
        m = len(X)
        levels = t.spec.priors.levels
        if warm:
            self.count += 1

        X, moved = self._block(X, rng)

        # levels fixed
        log_tau = np.log(X[:, -1])
        new = log_tau + np.exp(self.log_s[0]) * rng.standard_normal(m)
        with np.errstate(invalid="ignore", over="ignore"):
            ratio = (levels.logpdf(X[:, :L], np.exp(new)) + new) - (levels.logpdf(X[:, :L], np.exp(log_tau)) + log_tau)
        ratio = np.where(np.isfinite(ratio), ratio, -np.inf)
        acc = np.log(rng.random(m)) < ratio
        X[acc, -1] = np.exp(new[acc])
        moved |= acc
        if warm:
            self._adapt(0, ratio)

        # standardised increments fixed
        log_tau = np.log(X[:, -1])
        new = log_tau + np.exp(self.log_s[1]) * rng.standard_normal(m)
        Y = X.copy()
        Y[:, 1:L] = X[:, :1] + np.exp(new - log_tau)[:, None] * (X[:, 1:L] - X[:, :1])
        Y[:, -1] = np.exp(new)
        with np.errstate(invalid="ignore", over="ignore"):
            cur = t.log_likelihood_natural(X) + t.log_prior_natural(X)
            prop = t.log_likelihood_natural(Y) + t.log_prior_natural(Y)
            ratio = prop - cur + L * (new - log_tau)
        ratio = np.where(np.isfinite(ratio), ratio, -np.inf)
        acc = np.log(rng.random(m)) < ratio
        X[acc] = Y[acc]
        moved |= acc
        if warm:
            self._adapt(1, ratio)

        if not moved.any():
            return U, lp, moved
        U_new = U.copy()
        U_new[moved] = t.to_sampling(X[moved])
        lp_new = lp.copy()
        lp_new[moved] = t.log_density(U_new[moved])
        return U_new, lp_new, moved


def _numeric_hessian(grad, u, step=1e-5):
    d = len(u)
    H = np.empty((d, d))
    for j in range(d):
        h = step * max(1.0, abs(u[j]))
        e = np.zeros(d)
        e[j] = h
        H[:, j] = (grad(u + e) - grad(u - e)) / (2 * h)
    return 0.5 * (H + H.T)


def find_mode(target: StratumPosterior, u0=None):
    """Posterior mode on the sampling scale and a covariance for proposals.

    For random-walk level priors the joint density is unbounded as tau -> 0,
    so the levels are optimised at fixed tau and tau is then set to its
    conditional mode (a few coordinate-ascent sweeps).
    """
    u = target.crude_init() if u0 is None else np.array(u0, dtype=float)

    def neg(v, mask=None, base=None):
        w = v
        if mask is not None:
            w = base.copy()
            w[mask] = v
        val = target.log_density(w[None, :])[0]
        if not np.isfinite(val):
            return 1e300, np.zeros_like(v)
        g = target.grad(w)
        return -val, (-g if mask is None else -g[mask])

    if target.spec.hierarchical and (~target.nc[1:]).sum() >= 2:
        free = np.ones(target.dim, dtype=bool)
        free[-1] = False
        for _ in range(3):
            res = optimize.minimize(neg, u[free], args=(free, u), jac=True, method="L-BFGS-B")
            u[free] = res.x
            res = optimize.minimize(neg, u[~free], args=(~free, u), jac=True, method="L-BFGS-B",
                                    bounds=[(-6.0, 3.0)])
            u[~free] = res.x
    else:
        res = optimize.minimize(neg, u, jac=True, method="L-BFGS-B")
        u = res.x
    H = _numeric_hessian(target.grad, u)
    try:
        evals, evecs = np.linalg.eigh(-H)
        floor = max(evals.max(), 1.0) * 1e-8
        evals = np.where(evals > floor, evals, np.nan)
        if np.isnan(evals).any():
            # non-concave directions: fall back to a unit-ish scale there
            evals = np.where(np.isnan(evals), 1.0, evals)
        cov = (evecs / evals) @ evecs.T
    except np.linalg.LinAlgError:
        cov = np.eye(target.dim) * 0.01
    return u, cov


@dataclass
class StratumFit:
    spec: StratumSpec
    draws: PosteriorDraws
    mode: np.ndarray

    def model(self, j: int):
        return self.spec.model_from_row(self.draws.draws[j])


def _stratum_seed(seed: int, spec: StratumSpec) -> int:
    return rngmod.child_seed(seed, spec.cause, 2 if spec.arm is None else spec.arm)


def _run_chains(target, u0, cov, cfg, spec):
    extra = _HierarchicalMoves(target, cfg.n_chains) if spec.hierarchical else None
    return sample_posterior(target.log_density, u0, cfg, names=spec.param_names,
                            to_natural=target.to_natural, vectorized=True, proposal_cov=cov, extra_move=extra)


def _pilot_score(target, cfg, spec) -> float:
    u0, cov = find_mode(target)
    pilot = cfg.replace(n_warmup=min(cfg.n_warmup, PILOT_ITERATIONS), n_draws=min(cfg.n_draws, PILOT_ITERATIONS),
                        thin=1)
    try:
        draws = _run_chains(target, u0, cov, pilot, spec)
    except SamplerError:
        return -1.0
    ess = np.nan_to_num(draws.ess, nan=0.0)
    rhat = float(np.max(np.nan_to_num(draws.rhat, nan=np.inf)))
    return float(ess.min()) / (1.0 + 10.0 * max(0.0, rhat - 1.0))


def _choose_target(spec, data, cfg, noncentered):
    """For random-walk level priors without an explicit choice, compare
    parametrisations on short pilot chains and keep the most efficient."""
    if noncentered is not None or not spec.hierarchical:
        return StratumPosterior(spec, data, noncentered)
    candidates = []
    for arg in (None, True, False):
        t = StratumPosterior(spec, data, arg)
        if not any(np.array_equal(t.nc, c.nc) for c in candidates):
            candidates.append(t)
    scores = [_pilot_score(t, cfg, spec) for t in candidates]
    best = int(np.argmax(scores))
    log.debug("%s: pilot scores %s", spec.label, scores)
    return candidates[best]


def fit_stratum(spec: StratumSpec, data: CompetingRiskDataset, config: SamplerConfig = SamplerConfig(),
                *, seed: int | None = None, noncentered=None, max_thin: int = MAX_AUTO_THIN) -> StratumFit:
    """Sample the posterior of one stratum.

    If diagnostics fail (or a chain stalls), the chains are rerun with
    doubled thinning (same number of retained draws) up to ``max_thin``.
    """
    cfg = config if seed is None else config.replace(seed=seed)
    target = _choose_target(spec, data, cfg, noncentered)
    u0, cov = find_mode(target)
    while True:
        try:
            draws = _run_chains(target, u0, cov, cfg, spec)
            if draws.converged or cfg.thin * 2 > max_thin:
                break
            log.info("%s: diagnostics failed at thin=%d, retrying", spec.label, cfg.thin)
        except SamplerError:
            if cfg.thin * 2 > max_thin:
                raise
            log.info("%s: chain stalled at thin=%d, retrying", spec.label, cfg.thin)
        cfg = cfg.replace(thin=cfg.thin * 2)
    return StratumFit(spec, draws, target.to_natural(u0[None, :])[0])


@dataclass
class FittedModel:
    """Posterior draws for every stratum of a prediction model."""

    fits: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        counts = {f.draws.n_total for f in self.fits.values()}
        if len(counts) != 1:
            raise ModelError("strata have different numbers of draws")
        return counts.pop()

    def model_set(self, j: int) -> CauseModelSet:
        return CauseModelSet({key: fit.model(j) for key, fit in self.fits.items()})

    def flagged(self) -> dict:
        out = {}
        for key, fit in self.fits.items():
            bad = fit.draws.flagged()
            if bad:
                out[fit.spec.label] = bad
        return out

    def diagnostics_summary(self) -> dict:
        out = {}
        for fit in self.fits.values():
            out[fit.spec.label] = {
                name: {"ess": round(float(fit.draws.ess[i]), 6), "rhat": round(float(fit.draws.rhat[i]), 6)}
                for i, name in enumerate(fit.draws.names)
            }
        return out


def check_coverage(specs: Sequence[StratumSpec]):
    keys = [s.key for s in specs]
    if len(set(keys)) != len(keys):
        raise ModelError("duplicate strata in model specification")
    CauseModelSet({s.key: object() for s in specs})  # raises when a (cause, arm) is uncovered


def fit_models(specs: Sequence[StratumSpec], data: CompetingRiskDataset,
               config: SamplerConfig = SamplerConfig(), *, require_convergence: bool = True) -> FittedModel:
    """Fit every stratum; raise :class:`ConvergenceError` on failed diagnostics."""
    check_coverage(specs)
    fitted = FittedModel()
    for spec in specs:
        try:
            fit = fit_stratum(spec, data, config, seed=_stratum_seed(config.seed, spec))
        except SamplerError as exc:
            raise ConvergenceError(f"{spec.label}: {exc}", {spec.label: ["stalled"]}) from exc
        fitted.fits[spec.key] = fit
        # undefined diagnostics (nan) count as the worst case
        log.info("fitted %s: min ESS %.0f, max R-hat %.4f", spec.label,
                 np.min(np.nan_to_num(fit.draws.ess, nan=0.0)), np.max(np.nan_to_num(fit.draws.rhat, nan=np.inf)))
    flagged = fitted.flagged()
    if flagged and require_convergence:
        raise ConvergenceError(f"posterior diagnostics failed for {flagged}", flagged)
    return fitted
