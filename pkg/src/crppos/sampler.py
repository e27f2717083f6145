"""Adaptive Metropolis sampling and convergence diagnostics.

The sampler runs all chains in lock-step so that a vectorised target (one
call per iteration for every chain) can be used.  Each chain still owns its
own random stream keyed by ``(seed, chain)``.

Warmup
    Proposal scale is tuned per chain by Robbins-Monro towards
    ``target_accept``.  The proposal covariance is re-estimated from pooled
    warmup draws at the end of doubling windows: diagonal after the first
    window, full covariance afterwards.  Everything is frozen once warmup
    ends, and warmup draws are discarded.

Kernels
    ``"rwm"`` is a pure random walk.  ``"mixture"`` additionally proposes,
    with probability ``independence_prob``, from a multivariate-t fitted to
    the warmup draws (an independence Metropolis-Hastings move); both moves
    leave the target invariant, so their mixture does too.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import rng as rngmod
from .priors import Beta

__all__ = [
    "SamplerError",
    "SamplerConfig",
    "PosteriorDraws",
    "sample_posterior",
    "diagnostics",
    "split_rhat",
    "effective_sample_size",
    "beta_conjugate_update",
    "save_draws",
]

log = logging.getLogger(__name__)

T_DF = 20.0


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    seed: int = 0
    target_accept: float = 0.30
    adapt_window: int = 50
    stall_window: int = 200
    ess_min: float = 400.0
    rhat_max: float = 1.01
    kernel: str = "mixture"
    independence_prob: float = 0.5
    thin: int = 1

    def __post_init__(self):
        if self.n_chains < 1 or self.n_draws < 1 or self.n_warmup < 0:
            raise ValueError("n_chains and n_draws must be >= 1, n_warmup >= 0")
        if not self.ess_min > 0:
            raise ValueError("ess_min must be positive")
        if not self.rhat_max > 1:
            raise ValueError("rhat_max must exceed 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.kernel not in ("rwm", "mixture"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.independence_prob < 1:
            raise ValueError("independence_prob must lie in [0, 1)")

    def replace(self, **kw) -> "SamplerConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SamplerConfig(**d)


@dataclass
class PosteriorDraws:
    """Post-warmup draws on the natural parameter scale.

    ``chains`` has shape (n_chains, n_draws, n_params); ``draws`` pools the
    chains in chain order.
    """

    names: tuple
    chains: np.ndarray
    ess: np.ndarray
    rhat: np.ndarray
    seed: int
    acceptance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ess_min: float = 400.0
    rhat_max: float = 1.01

    @property
    def draws(self) -> np.ndarray:
        m, n, p = self.chains.shape
        return self.chains.reshape(m * n, p)

    @property
    def n_total(self) -> int:
        return self.chains.shape[0] * self.chains.shape[1]

    def column(self, name) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def flagged(self) -> list:
        """Parameters whose ESS or R-hat violate the configured thresholds."""
        bad = []
        for i, name in enumerate(self.names):
            e, r = self.ess[i], self.rhat[i]
            if not (np.isfinite(e) and np.isfinite(r)) or e < self.ess_min or r > self.rhat_max:
                bad.append(name)
        return bad

    @property
    def converged(self) -> bool:
        return not self.flagged()

    def summary(self) -> list[dict]:
        d = self.draws
        q = np.quantile(d, [0.025, 0.5, 0.975], axis=0)
        rows = []
        for i, name in enumerate(self.names):
            rows.append({
                "parameter": name,
                "mean": float(d[:, i].mean()),
                "sd": float(d[:, i].std(ddof=1)) if len(d) > 1 else float("nan"),
                "q2.5": float(q[0, i]),
                "median": float(q[1, i]),
                "q97.5": float(q[2, i]),
                "ess": float(self.ess[i]),
                "rhat": float(self.rhat[i]),
            })
        return rows


# -- diagnostics -----------------------------------------------------------------


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, x.shape[1] - half:]])


def split_rhat(x) -> float:
    """Split-chain potential scale reduction for one parameter, x of shape (chains, draws)."""
    x = _split(np.asarray(x, dtype=float))
    m, n = x.shape
    if n < 2:
        return float("nan")
    w = x.var(axis=1, ddof=1).mean()
    if not w > 0:
        return float("nan")
    b_over_n = x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b_over_n
    return float(math.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft, axis=1)
    return np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n] / n


def effective_sample_size(x) -> float:
    """Multi-chain ESS (split chains, Geyer initial monotone sequence)."""
    x = _split(np.asarray(x, dtype=float))
    m, n = x.shape
    if n < 4:
        return float("nan")
    acov = _autocov(x)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float("nan")
    rho = np.zeros(n)
    rho[0] = 1.0
    even = 1.0
    odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = odd
    t = 1
    while t < n - 3 and even + odd > 0.0:
        even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if even + odd >= 0:
            rho[t + 1] = even
            rho[t + 2] = odd
        t += 2
    max_t = t - 2
    if even > 0:
        rho[max_t + 1] = even
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = (rho[t - 1] + rho[t]) / 2.0
        t += 2
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1: max_t + 2].sum()
    tau = max(tau, 1.0 / math.log10(m * n))
    return float(m * n / tau)


def _diag_arrays(chains: np.ndarray):
    p = chains.shape[2]
    ess = np.array([effective_sample_size(chains[:, :, j]) for j in range(p)])
    rhat = np.array([split_rhat(chains[:, :, j]) for j in range(p)])
    return ess, rhat


def diagnostics(draws: PosteriorDraws, ess_min: float | None = None, rhat_max: float | None = None) -> dict:
    """Per-parameter ``{"ess", "rhat", "flagged"}``.

    A parameter is flagged when ESS < ``ess_min``, R-hat > ``rhat_max`` or
    either is undefined (e.g. a constant chain).
    """
    chains = draws.chains
    if chains.shape[0] < 2:
        raise ValueError("diagnostics need at least 2 chains")
    ess_min = draws.ess_min if ess_min is None else ess_min
    rhat_max = draws.rhat_max if rhat_max is None else rhat_max
    ess, rhat = _diag_arrays(chains)
    out = {}
    for j, name in enumerate(draws.names):
        e, r = ess[j], rhat[j]
        flagged = not (np.isfinite(e) and np.isfinite(r)) or e < ess_min or r > rhat_max
        out[name] = {"ess": float(e), "rhat": float(r), "flagged": bool(flagged)}
    return out


# -- sampler -----------------------------------------------------------------------


def _windows(n_warmup: int, base: int) -> list[int]:
    """Iteration indices (exclusive ends) at which the covariance is re-estimated."""
    if n_warmup < 20:
        return []
    start = int(0.15 * n_warmup)
    end = int(0.9 * n_warmup)
    ends, w, cur = [], max(base, 5), start
    while cur + w <= end:
        nxt = cur + w
        if nxt + 2 * w > end:
            nxt = end
        ends.append(nxt)
        cur, w = nxt, 2 * w
    return ends


def _updated_cov(samples: np.ndarray, previous: np.ndarray, diagonal: bool, n_eff: float) -> np.ndarray:
    """Window covariance estimate shrunk towards the previous proposal covariance.

    The weight of the new estimate grows with its effective sample size.
    """
    n, p = samples.shape
    if diagonal:
        est = np.diag(samples.var(axis=0, ddof=1))
    else:
        est = np.atleast_2d(np.cov(samples, rowvar=False))
    w = n_eff / (n_eff + 1.0 * p)
    return w * est + (1.0 - w) * previous


def _chol(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    for jitter in (0.0, 1e-10, 1e-8, 1e-6, 1e-4):
        try:
            return linalg.cholesky(cov + jitter * np.eye(len(cov)) * max(1.0, np.trace(cov) / len(cov)), lower=True)
        except linalg.LinAlgError:
            continue
    return np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-12)))


class _TProposal:
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.L = _chol(cov)
        self.p = len(self.mean)

    def draw(self, z, chi2):
        return self.mean + (z @ self.L.T) * np.sqrt(T_DF / chi2)[:, None]

    def logpdf(self, x):
        d = linalg.solve_triangular(self.L, (x - self.mean).T, lower=True)
        q = (d * d).sum(axis=0)
        return -0.5 * (T_DF + self.p) * np.log1p(q / T_DF)


def _as_batch(target, vectorized):
    if vectorized:
        return target

    def batched(x):
        return np.array([target(row) for row in x], dtype=float)

    return batched


def sample_posterior(
    target: Callable,
    init,
    config: SamplerConfig = SamplerConfig(),
    *,
    names: Sequence[str] | None = None,
    to_natural: Callable | None = None,
    vectorized: bool = False,
    proposal_cov=None,
    extra_move: Callable | None = None,
) -> PosteriorDraws:
    """Draw from ``exp(target)`` with adaptive Metropolis.

    Parameters
    ----------
    target : callable
        Log density on the sampling (unconstrained) scale.  With
        ``vectorized=True`` it maps an (m, p) array to m values.
    init : array_like
        Starting point; the target must be finite there.  Chains start from
        ``init`` perturbed by one proposal-scale step.
    proposal_cov : array_like, optional
        Initial proposal covariance, e.g. the inverse Hessian at the mode.
    to_natural : callable, optional
        Maps an (N, p) array of sampling-scale draws to the natural scale in
        which draws are stored and diagnosed.
    extra_move : callable, optional
        Additional target-preserving update applied after every Metropolis
        step, called as ``extra_move(x, lp, rng, warm)`` with the (m, p)
        states and their log densities; returns ``(x, lp, moved)``.

    Raises
    ------
    SamplerError
        If the target is not finite at ``init`` or a chain accepts nothing
        for ``stall_window`` consecutive iterations.
    """
    cfg = config
    init = np.atleast_1d(np.asarray(init, dtype=float))
    p = init.size
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(p))
    batch = _as_batch(target, vectorized)
    lp_init = float(batch(init[None, :])[0])
    if not np.isfinite(lp_init):
        raise SamplerError("target is not finite at the initial point")

    m = cfg.n_chains
    n_iter = cfg.n_warmup + cfg.n_draws * cfg.thin
    gens = [rngmod.stream(cfg.seed, rngmod.FIT, c) for c in range(m)]
    # deviates per chain, drawn up-front in a fixed order
    Z = np.stack([g.standard_normal((n_iter + 1, p)) for g in gens])
    logU = np.stack([np.log(g.random(n_iter)) for g in gens])
    pick = np.stack([g.random(n_iter) for g in gens])
    chi2 = np.stack([g.chisquare(T_DF, n_iter) for g in gens])
    extra_rng = rngmod.stream(cfg.seed, rngmod.FIT, m) if extra_move is not None else None

    cov = np.eye(p) * 0.01 if proposal_cov is None else np.atleast_2d(np.asarray(proposal_cov, dtype=float))
    L = _chol(cov)
    log_s = np.full(m, math.log(2.38 / math.sqrt(p)))
    use_mix = cfg.kernel == "mixture"
    indep = None

    x = init + 0.5 * (Z[:, 0, :] @ L.T)
    lp = batch(x)
    bad = ~np.isfinite(lp)
    x[bad] = init
    lp[bad] = lp_init
    if m == 1 or cfg.n_warmup == 0:
        x[0] = init
        lp[0] = lp_init

    if use_mix and proposal_cov is not None:
        indep = _TProposal(init, cov)

    windows = _windows(cfg.n_warmup, cfg.adapt_window)
    win_start = int(0.15 * cfg.n_warmup) if windows else cfg.n_warmup
    n_updates = 0

    out = np.empty((m, cfg.n_draws, p))
    acc_count = np.zeros(m)
    last_accept = np.zeros(m, dtype=int)
    hist = np.empty((m, cfg.n_warmup, p)) if cfg.n_warmup else None
    hist_lp = np.empty((m, cfg.n_warmup)) if cfg.n_warmup else None
    rm_count = 0

    for it in range(n_iter):
        warm = it < cfg.n_warmup
        z = Z[:, it + 1, :]
        if use_mix and indep is not None:
            is_ind = pick[:, it] < cfg.independence_prob
        else:
            is_ind = np.zeros(m, dtype=bool)
        prop = x + np.exp(log_s)[:, None] * (z @ L.T)
        if is_ind.any():
            prop[is_ind] = indep.draw(z[is_ind], chi2[is_ind, it])
        lp_prop = batch(prop)
        log_ratio = lp_prop - lp
        if is_ind.any():
            log_ratio = np.where(is_ind, log_ratio + indep.logpdf(x) - indep.logpdf(prop), log_ratio)
        log_ratio = np.where(np.isfinite(lp_prop), log_ratio, -np.inf)
        accept = logU[:, it] < log_ratio
        if accept.any():
            x = np.where(accept[:, None], prop, x)
            lp = np.where(accept, lp_prop, lp)
            last_accept[accept] = it
        if extra_move is not None:
            x, lp, moved = extra_move(x, lp, extra_rng, warm)
            last_accept[moved] = it
        if np.any(it - last_accept >= cfg.stall_window):
            raise SamplerError(f"no proposal accepted for {cfg.stall_window} iterations (pathological target?)")

        if warm:
            hist[:, it, :] = x
            hist_lp[:, it] = lp
            rw = ~is_ind
            if rw.any():
                rm_count += 1
                gain = 1.0 / (rm_count + 10.0) ** 0.6
                a = np.exp(np.minimum(log_ratio, 0.0))
                log_s = np.where(rw, log_s + gain * (a - cfg.target_accept) * 2.0, log_s)
            if windows and n_updates < len(windows) and it + 1 == windows[n_updates]:
                block = hist[:, win_start:it + 1, :]
                samp = block.reshape(-1, p)
                n_eff = np.nanmedian([effective_sample_size(block[:, :, j]) for j in range(p)])
                if not np.isfinite(n_eff):
                    n_eff = 1.0
                diagonal = proposal_cov is None and n_updates == 0 and len(windows) > 1
                cov = _updated_cov(samp, cov, diagonal, n_eff)
                L = _chol(cov)
                log_s = np.full(m, math.log(2.38 / math.sqrt(p)))
                rm_count = 0
                if use_mix:
                    cand = _TProposal(samp.mean(axis=0), cov)
                    # keep whichever independence proposal has less dispersed importance weights
                    lps = hist_lp[:, win_start:it + 1].reshape(-1)
                    if indep is None or np.var(lps - cand.logpdf(samp)) < np.var(lps - indep.logpdf(samp)):
                        indep = cand
                n_updates += 1
                if n_updates == 1:
                    # later estimates use every draw since the first window
                    win_start = it + 1
        else:
            j, r = divmod(it - cfg.n_warmup, cfg.thin)
            if r == cfg.thin - 1:
                out[:, j, :] = x
            acc_count += accept

    if to_natural is not None:
        nat = np.asarray(to_natural(out.reshape(-1, p)), dtype=float).reshape(m, cfg.n_draws, -1)
    else:
        nat = out
    ess, rhat = _diag_arrays(nat)
    return PosteriorDraws(names=names, chains=nat, ess=ess, rhat=rhat, seed=cfg.seed,
                          acceptance=acc_count / (cfg.n_draws * cfg.thin), ess_min=cfg.ess_min, rhat_max=cfg.rhat_max)


def beta_conjugate_update(prior: Beta, successes: int, trials: int) -> Beta:
    """Posterior of a Bernoulli probability under a Beta prior."""
    if not 0 <= successes <= trials:
        raise ValueError(f"need 0 <= successes <= trials, got {successes} of {trials}")
    return Beta(prior.a + successes, prior.b + trials - successes)


def save_draws(draws: PosteriorDraws, path) -> Path:
    """One row per pooled draw, one column per parameter (plus chain index)."""
    path = Path(path)
    d = draws.draws
    m, n, _ = draws.chains.shape
    chain = np.repeat(np.arange(m), n)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", *draws.names])
        for c, row in zip(chain, d):
            w.writerow([int(c), *(repr(float(v)) for v in row)])
    return path
