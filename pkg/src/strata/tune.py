"""Tree-structured Parzen Estimator search over boosting hyperparameters.

The sampler is factored: every dimension gets its own pair of Parzen
densities, ``l`` fitted to the best trials and ``g`` to the rest, and the
candidate drawn from ``l`` with the largest ``prod l(x) / g(x)`` wins.
Kernels are Gaussians truncated to the bounds; log-scaled dimensions are
modelled in log space and integer dimensions by the kernel mass of the unit
interval around each integer.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm

logger = logging.getLogger(__name__)

COMPLETE, FAILED = "complete", "failed"
KINDS = ("int_uniform", "uniform", "log_uniform")


class SearchSpaceError(ValueError):
    pass


class AllTrialsFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Dimension:
    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SearchSpaceError(f"unknown dimension kind {self.kind!r}")
        if not self.low < self.high:
            raise SearchSpaceError("lower bound must be below upper bound")
        if self.kind == "log_uniform" and self.low <= 0:
            raise SearchSpaceError("log_uniform bounds must be positive")
        if self.kind == "int_uniform" and (int(self.low) != self.low or int(self.high) != self.high):
            raise SearchSpaceError("int_uniform bounds must be integers")

    def bounds(self) -> tuple[float, float]:
        """Bounds of the internal (modelling) coordinate."""
        if self.kind == "log_uniform":
            return math.log(self.low), math.log(self.high)
        if self.kind == "int_uniform":
            return self.low - 0.5, self.high + 0.5
        return self.low, self.high

    def to_internal(self, value) -> float:
        return math.log(value) if self.kind == "log_uniform" else float(value)

    def from_internal(self, u: float):
        lo, hi = self.bounds()
        u = min(max(u, lo), hi)
        if self.kind == "log_uniform":
            return min(max(math.exp(u), self.low), self.high)
        if self.kind == "int_uniform":
            return int(min(max(round(u), self.low), self.high))
        return u


DEFAULT_SPACE = {
    "n_estimators": Dimension("int_uniform", 100, 400),
    "max_depth": Dimension("int_uniform", 4, 12),
    "learning_rate": Dimension("log_uniform", 0.005, 0.1),
    "subsample": Dimension("uniform", 0.5, 1.0),
    "colsample_bytree": Dimension("uniform", 0.5, 1.0),
    "reg_alpha": Dimension("log_uniform", 1e-4, 1.0),
}


@dataclass
class SearchSpace:
    dims: dict[str, Dimension] = field(default_factory=lambda: dict(DEFAULT_SPACE))

    def __post_init__(self):
        if not self.dims:
            raise SearchSpaceError("search space is empty")
        self.dims = {k: v if isinstance(v, Dimension) else Dimension(**v)
                     for k, v in sorted(self.dims.items())}

    @classmethod
    def with_overrides(cls, overrides: dict | None = None) -> "SearchSpace":
        dims = dict(DEFAULT_SPACE)
        for name, spec in (overrides or {}).items():
            dims[name] = spec if isinstance(spec, Dimension) else Dimension(**spec)
        return cls(dims)

    def contains(self, point: dict) -> bool:
        for name, d in self.dims.items():
            v = point[name]
            if not d.low <= v <= d.high:
                return False
            if d.kind == "int_uniform" and int(v) != v:
                return False
        return True


@dataclass(frozen=True)
class TPEConfig:
    n_trials: int = 100
    gamma_fraction: float = 0.25
    n_startup: int = 20
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma_fraction < 1:
            raise SearchSpaceError("gamma_fraction must lie in (0, 1)")
        if self.n_trials < 1 or self.n_candidates < 1 or self.n_startup < 0:
            raise SearchSpaceError("trial and candidate counts must be positive")
        if self.n_startup >= self.n_trials:
            raise SearchSpaceError("n_startup must be smaller than n_trials")


@dataclass
class Trial:
    index: int
    params: dict
    objective: float
    status: str = COMPLETE


class _Parzen:
    """Truncated-Gaussian mixture over one internal coordinate."""

    def __init__(self, obs, lo: float, hi: float):
        span = hi - lo
        mus = np.append(np.asarray(obs, dtype=np.float64), 0.5 * (lo + hi))
        n = len(mus)
        # bandwidth: wider of the two gaps to the sorted neighbours (bounds included)
        order = np.argsort(mus[:-1], kind="stable")
        srt = np.concatenate([[lo], mus[:-1][order], [hi]])
        gaps = np.maximum(srt[1:-1] - srt[:-2], srt[2:] - srt[1:-1])
        sig = np.empty(n)
        sig[order] = gaps
        sig[-1] = span
        sig = np.clip(sig, span / min(100.0, n), span)
        self.mus, self.sig, self.lo, self.hi = mus, sig, lo, hi
        self.w = np.full(n, 1.0 / n)
        self.mass = ndtr((hi - mus) / sig) - ndtr((lo - mus) / sig)

    def sample(self, rng, size: int) -> np.ndarray:
        comp = rng.choice(len(self.mus), size=size, p=self.w)
        mu, sd = self.mus[comp], self.sig[comp]
        return truncnorm.rvs((self.lo - mu) / sd, (self.hi - mu) / sd, loc=mu, scale=sd,
                             size=size, random_state=rng)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None] - self.mus[None, :]) / self.sig[None, :]
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sig * self.mass)
        return np.log(np.maximum(dens @ self.w, 1e-300))

    def log_mass(self, x: np.ndarray) -> np.ndarray:
        """Log probability of the unit interval centred on each integer ``x``."""
        a = np.maximum(x - 0.5, self.lo)[:, None]
        b = np.minimum(x + 0.5, self.hi)[:, None]
        m = (ndtr((b - self.mus) / self.sig) - ndtr((a - self.mus) / self.sig)) / self.mass
        return np.log(np.maximum(m @ self.w, 1e-300))


def split_history(history: list[Trial], gamma_fraction: float):
    """Good and bad trial lists; failed trials always land in the bad list."""
    done = [t for t in history if t.status == COMPLETE]
    done.sort(key=lambda t: (-t.objective, t.index))
    n_good = math.ceil(gamma_fraction * len(done)) if done else 0
    good = done[:n_good]
    bad = done[n_good:] + [t for t in history if t.status != COMPLETE]
    return good, bad


def random_point(space: SearchSpace, rng) -> dict:
    out = {}
    for name, d in space.dims.items():
        lo, hi = d.bounds()
        out[name] = d.from_internal(rng.uniform(lo, hi))
    return out


def tpe_suggest(history: list[Trial], space: SearchSpace, config: TPEConfig) -> dict:
    """Next point to evaluate; a pure function of ``history`` and ``config``."""
    if not space.dims:
        raise SearchSpaceError("search space is empty")
    rng = np.random.default_rng([config.seed, len(history)])
    good, bad = split_history(history, config.gamma_fraction)
    if len(history) < config.n_startup or not good:
        return random_point(space, rng)
    names = list(space.dims)
    cand = np.empty((config.n_candidates, len(names)))
    score = np.zeros(config.n_candidates)
    for k, name in enumerate(names):
        d = space.dims[name]
        lo, hi = d.bounds()
        l = _Parzen([d.to_internal(t.params[name]) for t in good], lo, hi)
        g = _Parzen([d.to_internal(t.params[name]) for t in bad], lo, hi)
        x = l.sample(rng, config.n_candidates)
        if d.kind == "int_uniform":
            x = np.clip(np.round(x), d.low, d.high)
            score += l.log_mass(x) - g.log_mass(x)
        else:
            score += l.log_pdf(x) - g.log_pdf(x)
        cand[:, k] = x
    best = int(np.argmax(score))
    return {name: space.dims[name].from_internal(cand[best, k]) for k, name in enumerate(names)}


def optimize(objective, space: SearchSpace | None = None, config: TPEConfig | None = None,
             on_trial=None):
    """Maximize ``objective(params)`` for ``config.n_trials`` evaluations.

    Exceptions raised by the objective, and non-finite returns, mark the
    trial failed.  Returns ``(best_trial, history)``.
    """
    space = space or SearchSpace()
    config = config or TPEConfig()
    history: list[Trial] = []
    for i in range(config.n_trials):
        params = tpe_suggest(history, space, config)
        try:
            value = float(objective(params))
            status = COMPLETE if math.isfinite(value) else FAILED
        except Exception as exc:  # a crashing configuration is data for the sampler
            logger.warning("trial %d failed: %s", i, exc)
            value, status = -math.inf, FAILED
        if status == FAILED:
            value = -math.inf
        trial = Trial(i, params, value, status)
        history.append(trial)
        if on_trial is not None:
            on_trial(trial)
        logger.debug("trial %d: %.6f %s", i, value, params)
    done = [t for t in history if t.status == COMPLETE]
    if not done:
        raise AllTrialsFailed(f"all {len(history)} trials failed")
    best = max(done, key=lambda t: (t.objective, -t.index))
    return best, history


def random_search(objective, space: SearchSpace, n_trials: int, seed: int = 0):
    """Baseline: every point drawn as in the TPE startup phase."""
    config = TPEConfig(n_trials=n_trials + 1, n_startup=n_trials, seed=seed)
    best, history = None, []
    for i in range(n_trials):
        params = tpe_suggest(history, space, config)
        t = Trial(i, params, float(objective(params)))
        history.append(t)
        if best is None or t.objective > best.objective:
            best = t
    return best, history


def write_trials(path, history: list[Trial], names=None) -> None:
    names = names or (sorted(history[0].params) if history else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_index", *names, "objective", "status"])
        for t in history:
            w.writerow([t.index, *(repr(t.params[n]) for n in names), repr(t.objective), t.status])
