"""Metaoptimizers over finite configuration spaces.

Both optimizers follow the same loop: ``suggest`` proposes a configuration
from the history, the caller evaluates it, and ``History.observe`` records
the result.  Losses of ``+inf`` mark incompatible configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .configspace import Configuration, ConfigSpace, ParamDomain

PHASES = ("pipeline", "algorithm", "joint")


@dataclass(frozen=True)
class Trial:
    config: Configuration
    loss: float
    phase: str
    clock: float
    eval_index: int
    info: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.loss)

    def to_json(self) -> dict:
        return {
            "eval_index": self.eval_index,
            "phase": self.phase,
            "clock": self.clock,
            "config": self.config.to_json(),
            "loss": self.loss if self.finite else None,
            **self.info,
        }


class History:
    """Append-only trial list with a first-minimum best pointer."""

    def __init__(self, trials=()):
        self.trials: list[Trial] = []
        self.best_index: int | None = None
        for t in trials:
            self.observe(t)

    def observe(self, trial: Trial) -> History:
        self.trials.append(trial)
        if trial.finite and (self.best_index is None or trial.loss < self.trials[self.best_index].loss):
            self.best_index = len(self.trials) - 1
        return self

    def best(self) -> Trial:
        if self.best_index is None:
            raise LookupError("history has no finite-loss trial")
        return self.trials[self.best_index]

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def best_trace(self) -> list[float]:
        """Best finite loss after each trial (``inf`` until one exists)."""
        out, cur = [], math.inf
        for t in self.trials:
            if t.finite and t.loss < cur:
                cur = t.loss
            out.append(cur)
        return out


def observe(history: History, trial: Trial) -> History:
    return history.observe(trial)


def best(history: History) -> Trial:
    return history.best()


@dataclass(frozen=True)
class OptimizerSettings:
    kind: str = "tpe"
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 8
    prior_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("random", "tpe"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly between 0 and 1")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be positive")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "gamma": self.gamma,
            "n_candidates": self.n_candidates,
            "n_startup": self.n_startup,
            "prior_weight": self.prior_weight,
        }

    @classmethod
    def from_json(cls, doc) -> OptimizerSettings:
        return cls(**doc) if doc else cls()


class RandomSearch:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def suggest(self, space: ConfigSpace, history: History) -> Configuration:
        return space.sample(self.rng)


class TPE:
    """Density-ratio optimizer with independent per-dimension Parzen estimators.

    Finite trials are split at the ``gamma`` quantile of loss; infinite-loss
    trials always go to the bad set.  Candidates are drawn from the good
    density ``l`` and the one maximizing ``l/g`` is returned, preferring
    configurations not yet evaluated.  Numeric grids use Gaussian kernels on
    grid-index positions with bandwidth ``max(1, (m - 1) / 20)``.
    """

    def __init__(self, rng: np.random.Generator, settings: OptimizerSettings | None = None):
        self.rng = rng
        self.settings = settings or OptimizerSettings()

    def split(self, space: ConfigSpace, history: History) -> tuple[list[Trial], list[Trial]]:
        finite = sorted((t for t in history if t.finite), key=lambda t: (t.loss, t.eval_index))
        n_good = max(1, math.ceil(self.settings.gamma * len(finite)))
        good = finite[:n_good]
        bad = finite[n_good:] + [t for t in history if not t.finite]
        return good, bad

    def _density(self, dim: ParamDomain, trials: list[Trial]) -> np.ndarray:
        m = dim.size
        prior = self.settings.prior_weight
        idx = [dim.index(t.config[dim.name]) for t in trials if dim.name in t.config]
        weights = np.full(m, prior / m)
        if idx:
            if dim.is_numeric and m > 1:
                bw = max(1.0, (m - 1) / 20.0)
                grid = np.arange(m)[None, :]
                kern = np.exp(-0.5 * ((grid - np.asarray(idx)[:, None]) / bw) ** 2)
                kern /= kern.sum(axis=1, keepdims=True)
                weights = weights + kern.sum(axis=0)
            else:
                weights = weights + np.bincount(idx, minlength=m)
        return weights / weights.sum()

    def suggest(self, space: ConfigSpace, history: History) -> Configuration:
        n_finite = sum(1 for t in history if t.finite)
        if n_finite < self.settings.n_startup:
            return space.sample(self.rng)
        good, bad = self.split(space, history)
        l_dens = {d.name: self._density(d, good) for d in space.dims}
        g_dens = {d.name: self._density(d, bad) for d in space.dims}
        candidates = []
        for _ in range(self.settings.n_candidates):
            values: dict[str, Any] = {}
            score = 0.0
            for d in space.dims:
                if not space.is_active(d.name, values):
                    continue
                l = l_dens[d.name]
                j = int(self.rng.choice(d.size, p=l))
                values[d.name] = d.values[j]
                score += math.log(l[j]) - math.log(g_dens[d.name][j])
            candidates.append((score, Configuration([(n, values[n]) for n in space.names if n in values])))
        order = sorted(range(len(candidates)), key=lambda i: -candidates[i][0])
        visited = {t.config for t in history}
        for i in order:
            if candidates[i][1] not in visited:
                return candidates[i][1]
        return candidates[order[0]][1]


def make_optimizer(settings: OptimizerSettings, rng: np.random.Generator):
    if settings.kind == "random":
        return RandomSearch(rng)
    return TPE(rng, settings)
