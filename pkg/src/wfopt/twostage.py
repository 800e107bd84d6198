"""Two-stage optimization: pipeline phase and algorithm phase under one budget.

The pipeline phase searches pipeline configurations with the algorithm held
at its current best configuration.  The algorithm phase transforms the data
once with the current best pipeline and runs an inner loop over algorithm
configurations, warm-started from the current best.  Policies decide how the
budget is divided between the phases:

* ``split``: ``(1 - omega) * T`` to the pipeline phase, then the rest to the
  algorithm phase;
* ``iterative``: alternate fixed slices, pipeline first;
* ``adaptive``: like iterative, but a phase's slice doubles after an
  improving slice and halves after two non-improving ones;
* ``joint``: a single optimizer over the product space.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import numpy as np

from .configspace import Configuration, ConfigSpace, union_space
from .errors import IncompatibilityError
from .learners import GRID_LABEL, CvResult, LearnerSpec, score_folds, stratified_folds, transform_folds
from .metaopt import History, OptimizerSettings, Trial, make_optimizer
from .pipeline import OperatorSignature, PipelineInstance, PipelinePrototype, fingerprint, pipeline_space

POLICY_KINDS = ("split", "iterative", "adaptive", "joint")
DEFAULT_EPSILON = 1e-4


def derive_seed(seed: int, component: str) -> int:
    """Per-component seed: ``SeedSequence([seed, crc32(component)])``, first 32-bit word."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


# -- budget -----------------------------------------------------------------


class BudgetClock:
    """Tracks consumption in evaluations or wall seconds, per phase.

    An evaluation that starts before exhaustion is always charged in full, so
    ``consumed`` may exceed ``total`` by one evaluation.
    """

    def __init__(self, mode: str, total: float):
        if mode not in ("evals", "wall"):
            raise ValueError(f"unknown budget mode {mode!r}")
        if total < 0:
            raise ValueError("budget must be non-negative")
        self.mode = mode
        self.total = float(total)
        self.ledger: dict[str, float] = {}
        self._start = time.perf_counter()
        self._mark = self._start

    @property
    def consumed(self) -> float:
        return float(sum(self.ledger.values()))

    @property
    def remaining(self) -> float:
        return self.total - self.consumed

    def exhausted(self) -> bool:
        return self.remaining <= 0

    def start_evaluation(self) -> None:
        self._mark = time.perf_counter()

    def charge(self, phase: str) -> float:
        if self.mode == "evals":
            cost = 1.0
        else:
            now = time.perf_counter()
            cost = now - self._mark
            self._mark = now
        self.ledger[phase] = self.ledger.get(phase, 0.0) + cost
        return cost

    def now(self) -> float:
        """Evaluations consumed (evals mode) or seconds since the clock started."""
        if self.mode == "evals":
            return self.consumed
        return time.perf_counter() - self._start


# -- policies ---------------------------------------------------------------


@dataclass(frozen=True)
class Policy:
    kind: str
    omega: float = 0.5
    slice: float = 15.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.slice <= 0:
            raise ValueError("slice must be positive")

    def label(self) -> str:
        if self.kind == "split":
            return f"split({self.omega:g})"
        if self.kind in ("iterative", "adaptive"):
            return f"{self.kind}({self.slice:g})"
        return "joint"

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "epsilon": _json_float(self.epsilon)}
        if self.kind == "split":
            out["omega"] = self.omega
        if self.kind in ("iterative", "adaptive"):
            out["slice"] = self.slice
        return out

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> Policy:
        eps = doc.get("epsilon", DEFAULT_EPSILON)
        return cls(
            kind=doc["kind"],
            omega=float(doc.get("omega", 0.5)),
            slice=float(doc.get("slice", doc.get("initial_slice", 15.0))),
            epsilon=math.inf if eps is None or eps == "inf" else float(eps),
        )

    @classmethod
    def parse(cls, text: str, epsilon: float = DEFAULT_EPSILON) -> Policy:
        """Parse ``split(0.5)``, ``iterative(15)``, ``adaptive(15)`` or ``joint``."""
        text = text.strip()
        if text == "joint":
            return cls("joint", epsilon=epsilon)
        name, _, rest = text.partition("(")
        if not rest.endswith(")"):
            raise ValueError(f"cannot parse policy {text!r}")
        arg = float(rest[:-1])
        if name == "split":
            return cls("split", omega=arg, epsilon=epsilon)
        return cls(name, slice=arg, epsilon=epsilon)


def split_schedule(omega: float, total: float, integral: bool = False) -> tuple[float, float]:
    """``((1 - omega) * T, omega * T)``; with ``integral`` the first part is rounded."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    t1 = (1.0 - omega) * total
    if integral:
        t1 = float(round(t1))
        return t1, total - t1
    return t1, omega * total


@dataclass(frozen=True)
class AdaptiveState:
    """Per-phase slice lengths and consecutive no-improvement counters."""

    slices: Mapping[str, float]
    counters: Mapping[str, int]
    lower: float
    upper: float

    @classmethod
    def initial(cls, t0: float, total: float) -> AdaptiveState:
        """Slices start at ``t0`` and stay in ``t0 * 2**j`` between ``t0/8`` and the largest such value <= T."""
        upper = t0 * 2.0 ** max(0, math.floor(math.log2(max(total, t0) / t0) + 1e-12))
        return cls({"pipeline": t0, "algorithm": t0}, {"pipeline": 0, "algorithm": 0}, t0 / 8.0, upper)


def adaptive_update(state: AdaptiveState, phase: str, improved: bool) -> AdaptiveState:
    slices = dict(state.slices)
    counters = dict(state.counters)
    if improved:
        slices[phase] = min(slices[phase] * 2.0, state.upper)
        counters[phase] = 0
    else:
        counters[phase] += 1
        if counters[phase] >= 2:
            slices[phase] = max(slices[phase] / 2.0, state.lower)
            counters[phase] = 0
    return replace(state, slices=slices, counters=counters)


# -- objectives --------------------------------------------------------------


@dataclass(frozen=True)
class Prepared:
    """A pipeline applied to the data once: the inner loop's ``X_t``."""

    pipeline: Configuration
    payload: Any
    fingerprint: str
    error: str | None = None


@dataclass(frozen=True)
class Evaluation:
    loss: float
    score: float | None = None
    error: str | None = None


class Objective(Protocol):
    pipeline_space: ConfigSpace
    algo_space: ConfigSpace
    baseline_pipeline: Configuration
    default_algo: Configuration

    def prepare(self, pipeline: Configuration) -> Prepared: ...

    def score(self, prepared: Prepared, algo: Configuration) -> Evaluation: ...


class WorkflowObjective:
    """Cross-validated accuracy of a pipeline prototype followed by a learner.

    Fold assignment and per-fold fitting seeds are fixed at construction, so
    the loss is a deterministic function of (pipeline config, algorithm config).
    """

    def __init__(
        self,
        proto: PipelinePrototype,
        catalog: Mapping[str, OperatorSignature],
        spec: LearnerSpec,
        X,
        y,
        n_folds: int = 10,
        seed: int = 0,
        prepare_cache: int = 16,
    ):
        self.proto = proto
        self.catalog = catalog
        self.spec = spec
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y)
        self.folds = stratified_folds(self.y, n_folds, np.random.default_rng(derive_seed(seed, "folds")))
        self.fit_seed = derive_seed(seed, "fit")
        self.pipeline_space = pipeline_space(proto, catalog)
        self.algo_space = spec.space
        self.baseline_pipeline = self.pipeline_space.default_configuration()
        self.default_algo = spec.default
        self._prepared: OrderedDict[str, Prepared] = OrderedDict()
        self._prepare_cache = prepare_cache
        self._scores: dict[tuple[str, str], Evaluation] = {}

    def prepare(self, pipeline: Configuration) -> Prepared:
        key = pipeline.key()
        if key in self._prepared:
            self._prepared.move_to_end(key)
            return self._prepared[key]
        inst = PipelineInstance.from_config(self.proto, pipeline)
        try:
            data = transform_folds(inst, self.catalog, self.X, self.y, self.folds, self.fit_seed)
            fp = fingerprint(*[a for fd in data for a in (fd.X_train, fd.y_train, fd.X_val)])
            prepared = Prepared(pipeline, data, fp)
        except IncompatibilityError as exc:
            prepared = Prepared(pipeline, None, "incompatible", str(exc))
        self._prepared[key] = prepared
        if len(self._prepared) > self._prepare_cache:
            self._prepared.popitem(last=False)
        return prepared

    def score(self, prepared: Prepared, algo: Configuration) -> Evaluation:
        key = (prepared.pipeline.key(), algo.key())
        if key in self._scores:
            return self._scores[key]
        if prepared.error is not None:
            ev = Evaluation(math.inf, None, prepared.error)
        else:
            res = score_folds(prepared.payload, self.spec, algo, self.fit_seed)
            ev = Evaluation(res.loss, res.mean_accuracy)
        self._scores[key] = ev
        return ev

    def evaluate(self, pipeline: Configuration, algo: Configuration) -> Evaluation:
        return self.score(self.prepare(pipeline), algo)

    def cv_result(self, pipeline: Configuration, algo: Configuration) -> CvResult:
        prepared = self.prepare(pipeline)
        if prepared.error is not None:
            return CvResult.failed(prepared.error)
        return score_folds(prepared.payload, self.spec, algo, self.fit_seed)


class SyntheticObjective:
    """Closed-form objective ``loss(pipeline, algo)`` over two given spaces.

    Useful for exercising policy mechanics without training models.  A
    ``None`` or ``inf`` loss marks the pipeline as incompatible.
    """

    def __init__(self, pipeline_space: ConfigSpace, algo_space: ConfigSpace, loss,
                 baseline_pipeline: Configuration | None = None, default_algo: Configuration | None = None):
        self.pipeline_space = pipeline_space
        self.algo_space = algo_space
        self.loss = loss
        self.baseline_pipeline = baseline_pipeline or pipeline_space.default_configuration()
        self.default_algo = default_algo or algo_space.default_configuration()
        self.prepare_calls = 0

    def prepare(self, pipeline: Configuration) -> Prepared:
        self.prepare_calls += 1
        fp = format(zlib.crc32(pipeline.key().encode()), "08x")
        return Prepared(pipeline, None, fp)

    def score(self, prepared: Prepared, algo: Configuration) -> Evaluation:
        value = self.loss(prepared.pipeline, algo)
        if value is None or not math.isfinite(value):
            return Evaluation(math.inf, None, "incompatible")
        return Evaluation(float(value), 1.0 - float(value))


# -- run ---------------------------------------------------------------------


@dataclass(frozen=True)
class SliceRecord:
    index: int
    phase: str
    allotted: float
    consumed: float
    improved: bool
    fingerprint: str | None = None
    stop: str = "budget"

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "phase": self.phase,
            "allotted": self.allotted,
            "consumed": self.consumed,
            "improved": self.improved,
            "fingerprint": self.fingerprint,
            "stop": self.stop,
        }


@dataclass
class RunReport:
    policy: Policy
    seed: int
    budget_mode: str
    budget_total: float
    trials: list[Trial]
    best_pipeline: Configuration
    best_algo: Configuration
    best_loss: float
    ledger: dict[str, float]
    slices: list[SliceRecord] = field(default_factory=list)
    pipeline_dims: tuple[str, ...] = ()

    @property
    def best_score(self) -> float:
        return 1.0 - self.best_loss

    def phase_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.trials:
            out[t.phase] = out.get(t.phase, 0) + 1
        return out

    def split_config(self, config: Configuration) -> tuple[Configuration, Configuration]:
        dims = set(self.pipeline_dims)
        return (
            Configuration([(k, v) for k, v in config.items() if k in dims]),
            Configuration([(k, v) for k, v in config.items() if k not in dims]),
        )

    def trace_lines(self) -> list[str]:
        lines = []
        for t in self.trials:
            pipe, algo = self.split_config(t.config)
            rec = {
                "eval_index": t.eval_index,
                "phase": t.phase,
                "clock": t.clock,
                "slice": t.info.get("slice"),
                "config": {"pipeline": pipe.to_json(), "algorithm": algo.to_json()},
                "loss": t.loss if t.finite else None,
                "score": t.info.get("score"),
                "error": t.info.get("error"),
            }
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        return lines

    def summary(self) -> dict:
        return {
            "policy": self.policy.to_json(),
            "policy_label": self.policy.label(),
            "algorithm_grid": GRID_LABEL,
            "seed": self.seed,
            "budget": {"mode": self.budget_mode, "total": self.budget_total},
            "best": {
                "pipeline": self.best_pipeline.to_json(),
                "algorithm": self.best_algo.to_json(),
                "loss": self.best_loss,
                "score": self.best_score,
            },
            "n_trials": len(self.trials),
            "phase_counts": self.phase_counts(),
            "ledger": self.ledger,
            "slices": [s.to_json() for s in self.slices],
        }


class _Runner:
    def __init__(self, policy: Policy, objective: Objective, settings: Mapping[str, OptimizerSettings],
                 clock: BudgetClock, seed: int):
        self.policy = policy
        self.obj = objective
        self.clock = clock
        self.seed = seed
        rngs = {ph: np.random.default_rng(derive_seed(seed, f"{ph}-optimizer")) for ph in ("pipeline", "algorithm", "joint")}
        default = OptimizerSettings()
        self.opt = {ph: make_optimizer(settings.get(ph, default), rngs[ph]) for ph in rngs}
        self.hist = {ph: History() for ph in rngs}
        self.trials: list[Trial] = []
        self.slices: list[SliceRecord] = []
        self.best_pipe = objective.baseline_pipeline
        self.best_algo = objective.default_algo
        self.best_loss = math.inf
        self.current_slice = 0

    # one evaluation, charged to ``phase``
    def evaluate(self, phase: str, pipe: Configuration, algo: Configuration, prepared: Prepared | None = None) -> Trial:
        self.clock.start_evaluation()
        if prepared is None:
            prepared = self.obj.prepare(pipe)
        ev = self.obj.score(prepared, algo)
        self.clock.charge(phase)
        info: dict[str, Any] = {"slice": self.current_slice, "score": ev.score, "error": ev.error}
        trial = Trial(pipe.merged(algo), ev.loss, phase, self.clock.now(), len(self.trials), info)
        self.trials.append(trial)
        idx = trial.eval_index
        if phase == "joint":
            self.hist["joint"].observe(replace(trial, eval_index=idx))
        else:
            self.hist["pipeline"].observe(Trial(pipe, ev.loss, phase, trial.clock, idx))
            self.hist["algorithm"].observe(Trial(algo, ev.loss, phase, trial.clock, idx))
        if trial.finite and ev.loss < self.best_loss:
            self.best_loss = ev.loss
            self.best_pipe, self.best_algo = pipe, algo
        return trial

    def baseline(self, phase: str) -> Trial:
        return self.evaluate(phase, self.obj.baseline_pipeline, self.obj.default_algo)

    def _within(self, start: float, allot: float) -> bool:
        return not self.clock.exhausted() and self.clock.consumed - start < allot

    def pipeline_slice(self, allot: float, include_baseline: bool = False) -> SliceRecord:
        start, before = self.clock.consumed, self.best_loss
        if include_baseline:
            self.baseline("pipeline")
        while self._within(start, allot):
            pipe = self.opt["pipeline"].suggest(self.obj.pipeline_space, self.hist["pipeline"])
            self.evaluate("pipeline", pipe, self.best_algo)
        return self._record("pipeline", allot, start, before)

    def inner_loop(self, prepared: Prepared, prior: Configuration, allot: float,
                   first: Trial | None = None, start: float | None = None) -> tuple[float, Configuration, str]:
        """Warm-started algorithm search on fixed transformed data.

        The first evaluation is ``prior`` (or ``first``, when the caller has
        already evaluated it).  Stops when the allotment is spent or two
        consecutive values of the best-so-far loss differ by less than
        ``epsilon``.
        """
        if start is None:
            start = self.clock.consumed
        eps = self.policy.epsilon
        if first is None:
            first = self.evaluate("algorithm", prepared.pipeline, prior, prepared)
        best_loss, best_algo = first.loss, prior
        stop = "budget"
        while self._within(start, allot):
            algo = self.opt["algorithm"].suggest(self.obj.algo_space, self.hist["algorithm"])
            t = self.evaluate("algorithm", prepared.pipeline, algo, prepared)
            prev = best_loss
            if t.finite and t.loss < best_loss:
                best_loss, best_algo = t.loss, algo
            if cauchy_stop(prev, best_loss, eps):
                stop = "cauchy"
                break
        return best_loss, best_algo, stop

    def algorithm_slice(self, allot: float, first: Trial | None = None, start: float | None = None,
                        before: float | None = None) -> SliceRecord:
        if start is None:
            start, before = self.clock.consumed, self.best_loss
        prepared = self.obj.prepare(self.best_pipe)
        _, _, stop = self.inner_loop(prepared, self.best_algo, allot, first, start)
        return self._record("algorithm", allot, start, before, prepared.fingerprint, stop)

    def _record(self, phase, allot, start, before, fp=None, stop="budget") -> SliceRecord:
        improved = self.best_loss < before
        rec = SliceRecord(self.current_slice, phase, allot, self.clock.consumed - start, improved, fp, stop)
        self.slices.append(rec)
        self.current_slice += 1
        return rec

    def _slice_units(self, allot: float) -> float:
        return float(max(1, math.floor(allot))) if self.clock.mode == "evals" else allot

    # -- policies -------------------------------------------------------

    def run_split(self) -> None:
        t1, _ = split_schedule(self.policy.omega, self.clock.total, integral=self.clock.mode == "evals")
        if t1 > 0:
            self.pipeline_slice(t1, include_baseline=True)
        else:
            first = self.baseline("algorithm")
            self.algorithm_slice(self.clock.total, first=first, start=0.0, before=math.inf)
        # a Cauchy stop ends one inner loop; the phase restarts warm until its budget is spent
        while not self.clock.exhausted():
            self.algorithm_slice(self.clock.remaining)

    def run_alternating(self, adaptive: bool) -> None:
        state = AdaptiveState.initial(self.policy.slice, self.clock.total)
        phase = "pipeline"
        first_slice = True
        while first_slice or not self.clock.exhausted():
            allot = state.slices[phase] if adaptive else self.policy.slice
            units = self._slice_units(allot)
            if phase == "pipeline":
                rec = self.pipeline_slice(units, include_baseline=first_slice)
            else:
                rec = self.algorithm_slice(units)
            self.slices[-1] = replace(rec, allotted=allot)
            if adaptive:
                state = adaptive_update(state, phase, rec.improved)
            first_slice = False
            phase = "algorithm" if phase == "pipeline" else "pipeline"

    def run_joint(self) -> None:
        space = union_space(self.obj.pipeline_space, self.obj.algo_space, name="joint")
        pipe_dims = set(self.obj.pipeline_space.names)
        self.baseline("joint")
        while not self.clock.exhausted():
            cfg = self.opt["joint"].suggest(space, self.hist["joint"])
            pipe = Configuration([(k, v) for k, v in cfg.items() if k in pipe_dims])
            algo = Configuration([(k, v) for k, v in cfg.items() if k not in pipe_dims])
            self.evaluate("joint", pipe, algo)

    def report(self) -> RunReport:
        return RunReport(
            policy=self.policy,
            seed=self.seed,
            budget_mode=self.clock.mode,
            budget_total=self.clock.total,
            trials=self.trials,
            best_pipeline=self.best_pipe,
            best_algo=self.best_algo,
            best_loss=self.best_loss,
            ledger=dict(self.clock.ledger),
            slices=self.slices,
            pipeline_dims=tuple(self.obj.pipeline_space.names),
        )


def cauchy_stop(prev_best: float, best: float, eps: float) -> bool:
    """True when consecutive best-so-far losses differ by less than ``eps``."""
    if math.isinf(eps):
        return True
    if not (math.isfinite(prev_best) and math.isfinite(best)):
        return False
    return abs(best - prev_best) < eps


def run(
    policy: Policy,
    objective: Objective,
    clock: BudgetClock,
    seed: int = 0,
    optimizers: Mapping[str, OptimizerSettings] | None = None,
) -> RunReport:
    """Run one policy; the baseline (empty pipeline, default algorithm) is always trial 0."""
    runner = _Runner(policy, objective, optimizers or {}, clock, seed)
    if policy.kind == "split":
        runner.run_split()
    elif policy.kind == "iterative":
        runner.run_alternating(adaptive=False)
    elif policy.kind == "adaptive":
        runner.run_alternating(adaptive=True)
    else:
        runner.run_joint()
    return runner.report()


def _json_float(x: float):
    return x if math.isfinite(x) else "inf"
