"""Metropolis-Hastings calibration of SCM parameters against bevameter data.

Two stages mirror the two rigs: the plate forces fix ``(Kc, Kphi, n)``;
the annulus torques fix ``(c, phi)`` from the steady values and then
``Ks`` from the transient ones with ``(c, phi)`` held at their posterior
means.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import gaussian_kde

from .bevameter import GroundTruthSet, annulus_torque, plate_force
from .scm import NegativeModulusError, ScmParams

log = logging.getLogger(__name__)

RHAT_WARN = 1.1
MIN_ITERATIONS = 10_000  # fewer than this is flagged as under-sampled
KDE_POINTS = 512


# ------------------------------------------------------------------ priors and settings
@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform priors; ``names`` double as CSV column names."""

    names: tuple
    lower: tuple
    upper: tuple

    def __post_init__(self):
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ValueError("names and bounds differ in length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("every prior needs lower < upper")

    @classmethod
    def pressure(cls) -> "PriorSpec":
        return cls(("Kc", "Kphi", "n"), (-5.0e4, 1.0e3, 0.3), (5.0e4, 1.0e6, 1.5))

    @classmethod
    def shear_strength(cls) -> "PriorSpec":
        return cls(("c", "phi_deg"), (0.0, 5.0), (500.0, 45.0))

    @classmethod
    def janosi(cls) -> "PriorSpec":
        return cls(("Ks",), (1.0e-4,), (0.1,))

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, float)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x) -> bool:
        x = np.asarray(x, float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def log_density(self, x) -> float:
        return -float(np.log(self.width).sum()) if self.contains(x) else -math.inf


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 50_000
    burn_in: float = 0.2
    step_fraction: float | tuple = 0.02  # proposal sd as a fraction of prior width
    seed: int = 0
    chains: int = 4
    sigma2: float = 0.01
    residual_mode: str = "absolute"
    adapt: bool = True
    adapt_interval: int = 100
    target_acceptance: float = 0.3

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < 1:
            raise ValueError("need iterations >= 1 and 0 <= burn_in < 1")
        if self.burn_iterations >= self.iterations:
            raise ValueError("iterations must exceed the burn-in")
        if np.any(np.asarray(self.step_fraction, float) < 0):
            raise ValueError("step sizes must be >= 0")
        if self.chains < 1:
            raise ValueError("chain count must be >= 1")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")
        if self.residual_mode not in ("absolute", "normalized"):
            raise ValueError("residual_mode is 'absolute' or 'normalized'")

    @property
    def burn_iterations(self) -> int:
        return int(self.iterations * self.burn_in)


@dataclass
class Chain:
    names: tuple
    samples: np.ndarray  # (iterations, dim), burn-in included
    log_post: np.ndarray
    burn: int
    accepted: int  # accepted proposals after burn-in
    seed: int = 0

    def __post_init__(self):
        if len(self.samples) != len(self.log_post):
            raise ValueError("samples and log-posterior differ in length")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def kept(self) -> np.ndarray:
        return self.samples[self.burn:]

    @property
    def kept_log_post(self) -> np.ndarray:
        return self.log_post[self.burn:]

    @property
    def acceptance_rate(self) -> float:
        n = len(self.samples) - self.burn
        return self.accepted / n if n else 0.0


@dataclass
class PosteriorSummary:
    names: tuple
    mean: np.ndarray
    sd: np.ndarray
    kde: dict  # name -> (grid, density)
    rhat: np.ndarray | None  # None for a single chain
    map: np.ndarray
    chains: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def value(self, name: str, which: str = "mean") -> float:
        vec = self.mean if which == "mean" else self.map
        return float(vec[self.names.index(name)])

    def as_dict(self, which: str = "mean") -> dict:
        vec = self.mean if which == "mean" else self.map
        return {n: float(v) for n, v in zip(self.names, vec)}

    def report(self) -> str:
        lines = [f"{'param':>8} {'mean':>14} {'sd':>12} {'map':>14} {'R-hat':>10}"]
        for k, name in enumerate(self.names):
            rh = "n/a (single chain)" if self.rhat is None else f"{self.rhat[k]:.4f}"
            lines.append(f"{name:>8} {self.mean[k]:>14.6g} {self.sd[k]:>12.4g} {self.map[k]:>14.6g} {rh:>10}")
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


# ------------------------------------------------------------------ likelihoods
def _log_likelihood(pred, truth, sigma2: float, mode: str) -> float:
    res = np.asarray(pred, float) - truth
    if mode == "normalized":
        res = res / np.max(np.abs(truth))
    elif mode != "absolute":
        raise ValueError(f"unknown residual mode {mode!r}")
    return -0.5 / sigma2 * float(np.mean(res * res))


def likelihood_force(params, truth: GroundTruthSet | np.ndarray, sigma2: float = 0.01,
                     mode: str = "absolute") -> float:
    """Gaussian log-likelihood of plate forces for ``params = (Kc, Kphi, n)``.

    Raises on a non-positive ``Kc/r + Kphi`` for any plate.
    """
    table = truth.sinkage if isinstance(truth, GroundTruthSet) else np.asarray(truth, float)
    if len(table) == 0:
        raise ValueError("empty sinkage table")
    kc, kphi, n = (float(v) for v in params)
    r = table[:, 0]
    if np.any(kc / r + kphi <= 0):
        raise NegativeModulusError("Kc/r + Kphi <= 0 for a tabulated plate")
    return _log_likelihood(plate_force(table[:, 1], r, kc, kphi, n), table[:, 2], sigma2, mode)


def likelihood_torque(params, truth: GroundTruthSet, stage: str = "steady", fixed=None,
                      sigma2: float = 0.01, mode: str = "absolute") -> float:
    """Log-likelihood of annulus torques.

    ``stage="steady"``: ``params = (c, phi_deg)`` against the steady table.
    ``stage="transient"``: ``params = (Ks,)`` with ``fixed = (c, phi_deg)``
    against the transient table.
    """
    r_in, r_out, omega, g = truth.annulus()
    if stage == "steady":
        table = truth.steady
        if len(table) == 0:
            raise ValueError("empty steady table")
        c, phi = (float(v) for v in params)
        pred = annulus_torque(table[:, 0], r_in, r_out, omega, None, c, phi, 1.0, g)
        return _log_likelihood(pred, table[:, 1], sigma2, mode)
    if stage == "transient":
        table = truth.transient
        if len(table) == 0:
            raise ValueError("empty transient table")
        if fixed is None:
            raise ValueError("transient stage needs fixed (c, phi_deg)")
        (ks,) = (float(v) for v in np.atleast_1d(params))
        c, phi = fixed
        pred = annulus_torque(table[:, 0], r_in, r_out, omega, table[:, 1], c, phi, ks, g)
        return _log_likelihood(pred, table[:, 2], sigma2, mode)
    raise ValueError(f"unknown stage {stage!r}")


# ------------------------------------------------------------------ sampler
def mh_sample(log_target: Callable[[np.ndarray], float], prior: PriorSpec, config: ChainConfig,
              initial=None, seed: int | np.random.SeedSequence | None = None) -> Chain:
    """Random-walk Metropolis with Gaussian proposals inside a uniform prior.

    During burn-in (if ``config.adapt``) the proposal is tuned toward
    ``config.target_acceptance``: first a per-parameter scale, then, from
    half-way through burn-in, the empirical covariance of the chain. After
    burn-in the proposal is frozen.
    """
    x = prior.midpoint if initial is None else np.asarray(initial, float).copy()
    if not prior.contains(x):
        raise ValueError(f"initial point {x} is outside the prior")
    lp = log_target(x) + prior.log_density(x)
    if not math.isfinite(lp):
        raise ValueError(f"log target is not finite at the initial point {x}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = prior.dim
    step = np.broadcast_to(np.asarray(config.step_fraction, float), (d,)) * prior.width
    chol = np.diag(step)
    scale = 1.0
    using_cov = False
    adaptive = config.adapt and np.any(step > 0)
    n = config.iterations
    burn = config.burn_iterations
    samples = np.empty((n, d))
    log_post = np.empty(n)
    accepted = 0
    window_acc = 0
    lo, hi = prior.lo, prior.hi
    block = 4096
    for it in range(n):
        if it % block == 0:
            z = rng.standard_normal((block, d))
            logu = np.log(rng.random(block))
        k = it % block
        prop = x + scale * (chol @ z[k])
        if np.all(prop >= lo) and np.all(prop <= hi):
            lp_prop = log_target(prop)
            if logu[k] < lp_prop + prior.log_density(prop) - lp:
                x, lp = prop, lp_prop + prior.log_density(prop)
                window_acc += 1
                if it >= burn:
                    accepted += 1
        samples[it] = x
        log_post[it] = lp
        if adaptive and it < burn and (it + 1) % config.adapt_interval == 0:
            rate = window_acc / config.adapt_interval
            window_acc = 0
            scale *= math.exp(2.0 * (rate - config.target_acceptance))
            if it + 1 >= burn // 2 and it + 1 >= 4 * d:
                cov = np.cov(samples[(it + 1) // 2:it + 1].T).reshape(d, d) + np.diag((1e-10 * step) ** 2)
                try:
                    new = np.linalg.cholesky(cov * (2.38**2 / d))
                except np.linalg.LinAlgError:
                    new = None
                if new is not None and np.all(np.isfinite(new)) and np.any(np.diag(new) > 0):
                    if not using_cov:
                        scale, using_cov = 1.0, True
                    chol = new
    child_seed = config.seed if seed is None else seed
    return Chain(prior.names, samples, log_post, burn, accepted,
                 int(child_seed.entropy) if isinstance(child_seed, np.random.SeedSequence) else int(child_seed))


# ------------------------------------------------------------------ diagnostics
def gelman_rubin(chains: Sequence[Chain]) -> np.ndarray:
    """Split-chain potential scale reduction per parameter.

    All chains constant at one value give 1; zero within-chain variance
    with distinct chain values gives ``inf``.
    """
    if len(chains) < 2:
        raise ValueError("R-hat needs at least two chains")
    lengths = {len(c.kept) for c in chains}
    if len(lengths) != 1 or min(lengths) < 4:
        raise ValueError("chains must have equal post-burn-in lengths of at least 4")
    n = min(lengths) // 2
    parts = []
    for c in chains:
        kept = c.kept
        parts += [kept[:n], kept[len(kept) - n:]]
    arr = np.stack(parts)  # (m, n, d)
    m = arr.shape[0]
    means = arr.mean(axis=1)
    W = arr.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    out = np.empty(arr.shape[2])
    for k in range(arr.shape[2]):
        if W[k] == 0:
            out[k] = 1.0 if B[k] == 0 else math.inf
        else:
            var_hat = (n - 1) / n * W[k] + B[k] / n
            out[k] = math.sqrt(var_hat / W[k])
    return out


def _kde(samples: np.ndarray):
    mu = float(samples.mean())
    sd = float(samples.std())
    if sd == 0 or not np.isfinite(sd) or np.ptp(samples) == 0:
        # a point mass: a single grid cell carrying all the probability
        half = max(abs(mu) * 1e-9, 1e-12)
        grid = np.linspace(mu - half, mu + half, KDE_POINTS)
        dens = np.zeros(KDE_POINTS)
        dens[KDE_POINTS // 2] = 1.0 / (grid[1] - grid[0])
        return grid, dens
    kde = gaussian_kde(samples, bw_method="silverman")
    bw = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(samples.min() - 5 * bw, samples.max() + 5 * bw, KDE_POINTS)
    return grid, kde(grid)


def posterior_summary(chains: Sequence[Chain]) -> PosteriorSummary:
    if not chains:
        raise ValueError("no chains")
    names = chains[0].names
    pooled = np.concatenate([c.kept for c in chains])
    lp = np.concatenate([c.kept_log_post for c in chains])
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    kde = {name: _kde(pooled[:, k]) for k, name in enumerate(names)}
    rhat = gelman_rubin(chains) if len(chains) > 1 else None
    warn = []
    if rhat is not None:
        for name, r in zip(names, rhat):
            if not r <= RHAT_WARN:
                warn.append(f"R-hat for {name} is {r:.3g} (> {RHAT_WARN}); chains disagree")
    if len(chains[0]) < MIN_ITERATIONS:
        warn.append(f"under-sampled: {len(chains[0])} iterations per chain (< {MIN_ITERATIONS})")
    return PosteriorSummary(names, mean, sd, kde, rhat, pooled[int(np.argmax(lp))].copy(), list(chains), warn)


# ------------------------------------------------------------------ pipelines
def _start_points(residuals: Callable[[np.ndarray], np.ndarray], prior: PriorSpec, count: int,
                  seeds: list[np.random.SeedSequence]) -> list[np.ndarray]:
    """One bounded least-squares fit per chain from a random prior draw."""
    starts = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        x0 = prior.lo + prior.width * rng.uniform(0.25, 0.75, prior.dim)
        fit = least_squares(residuals, x0, bounds=(prior.lo, prior.hi), x_scale=prior.width,
                            method="trf", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        starts.append(np.clip(fit.x, prior.lo, prior.hi))
    return starts


def _run_chains(log_like: Callable, residuals: Callable, prior: PriorSpec, config: ChainConfig,
                initial: Sequence | None = None) -> PosteriorSummary:
    root = np.random.SeedSequence(config.seed)
    chain_seeds = root.spawn(config.chains)
    start_seeds = [s.spawn(1)[0] for s in chain_seeds]
    if initial is None:
        starts = _start_points(residuals, prior, config.chains, start_seeds)
    else:
        starts = [np.asarray(initial, float)] * config.chains

    def target(x):
        try:
            return log_like(x)
        except ValueError:
            return -math.inf

    chains = []
    for k in range(config.chains):
        c = mh_sample(target, prior, config, starts[k], chain_seeds[k])
        c.seed = k
        chains.append(c)
        log.info("chain %d: acceptance %.3f", k, c.acceptance_rate)
    return posterior_summary(chains)


def calibrate_pressure(truth: GroundTruthSet, prior: PriorSpec | None = None,
                       config: ChainConfig | None = None, initial=None) -> PosteriorSummary:
    truth.require("sinkage")
    if len(truth.plate_radii) < 2:
        raise ValueError("pressure calibration needs at least two plate radii")
    prior = prior or PriorSpec.pressure()
    config = config or ChainConfig()
    table = truth.sinkage
    scale = np.max(np.abs(table[:, 2]))

    def residuals(x):
        return (plate_force(table[:, 1], table[:, 0], *x) - table[:, 2]) / scale

    return _run_chains(lambda x: likelihood_force(x, table, config.sigma2, config.residual_mode),
                       residuals, prior, config, initial)


def calibrate_shear(truth: GroundTruthSet, priors: tuple[PriorSpec, PriorSpec] | None = None,
                    config: ChainConfig | None = None) -> PosteriorSummary:
    """Stage A samples ``(c, phi)`` on steady torques; stage B samples ``Ks``
    on transient torques with ``(c, phi)`` fixed at the stage-A means."""
    truth.require("steady", "transient")
    prior_a, prior_b = priors or (PriorSpec.shear_strength(), PriorSpec.janosi())
    config = config or ChainConfig()
    r_in, r_out, omega, g = truth.annulus()
    steady, trans = truth.steady, truth.transient

    def res_a(x):
        pred = annulus_torque(steady[:, 0], r_in, r_out, omega, None, x[0], x[1], 1.0, g)
        return (pred - steady[:, 1]) / np.max(np.abs(steady[:, 1]))

    stage_a = _run_chains(lambda x: likelihood_torque(x, truth, "steady", None, config.sigma2, config.residual_mode),
                          res_a, prior_a, config)
    fixed = tuple(float(v) for v in stage_a.mean)

    def res_b(x):
        pred = annulus_torque(trans[:, 0], r_in, r_out, omega, trans[:, 1], fixed[0], fixed[1], x[0], g)
        return (pred - trans[:, 2]) / np.max(np.abs(trans[:, 2]))

    stage_b = _run_chains(lambda x: likelihood_torque(x, truth, "transient", fixed, config.sigma2,
                                                      config.residual_mode),
                          res_b, prior_b, replace(config, seed=config.seed + 1))
    return merge_summaries(stage_a, stage_b)


def merge_summaries(*parts: PosteriorSummary) -> PosteriorSummary:
    names = tuple(n for p in parts for n in p.names)
    rh = None if any(p.rhat is None for p in parts) else np.concatenate([p.rhat for p in parts])
    kde = {}
    for p in parts:
        kde.update(p.kde)
    return PosteriorSummary(names, np.concatenate([p.mean for p in parts]), np.concatenate([p.sd for p in parts]),
                            kde, rh, np.concatenate([p.map for p in parts]),
                            [c for p in parts for c in p.chains], [w for p in parts for w in p.warnings],
                            list(parts))


def to_scm_params(pressure: PosteriorSummary, shear: PosteriorSummary, which: str = "mean") -> ScmParams:
    a = pressure.as_dict(which)
    b = shear.as_dict(which)
    return ScmParams(a["Kc"], a["Kphi"], a["n"], b["c"], b["phi_deg"], b["Ks"])


# ------------------------------------------------------------------ outputs
def write_chains(chains: Sequence[Chain], path: str | Path) -> None:
    names = chains[0].names
    rows = [",".join(("chain", "iter") + tuple(names) + ("logpost",))]
    for k, c in enumerate(chains):
        for it in range(len(c)):
            vals = ",".join(repr(float(v)) for v in c.samples[it])
            rows.append(f"{k},{it},{vals},{float(c.log_post[it])!r}")
    Path(path).write_text("\n".join(rows) + "\n")


def write_kde(summary: PosteriorSummary, path: str | Path) -> None:
    rows = ["param,x,density"]
    for name in summary.names:
        grid, dens = summary.kde[name]
        rows += [f"{name},{float(x)!r},{float(y)!r}" for x, y in zip(grid, dens)]
    Path(path).write_text("\n".join(rows) + "\n")
