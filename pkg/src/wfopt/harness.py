"""Datasets, experiment files, and the density, comparison and NMAD studies.

Experiment files are JSON documents with ``"schema": "wfopt.experiment/1"``::

    {
      "schema": "wfopt.experiment/1",
      "dataset": "iris",                      # or {"path": "data.csv", "label": "class"}
      "learner": "decision-tree",
      "prototype": "appendix-a",              # or an inline prototype document
      "optimizers": {"pipeline": {"kind": "tpe"}, "algorithm": {"kind": "tpe"}},
      "policy": {"kind": "iterative", "slice": 15},
      "budget": {"mode": "evals", "total": 100},
      "cv_folds": 10,
      "cauchy_epsilon": 1e-4,
      "seed": 0
    }

Seed splitting: every random component draws its seed as the first 32-bit
word of ``SeedSequence([seed, crc32(name)])`` where ``name`` is one of
``folds``, ``fit``, ``pipeline-optimizer``, ``algorithm-optimizer``,
``joint-optimizer`` or ``density-optimizer``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .configspace import Configuration, ConfigSpace
from .learners import GRID_LABEL, LearnerSpec, learner_spec
from .metaopt import History, OptimizerSettings, Trial, make_optimizer
from .nmad import NmadReport, OptimalSet, fixture_path, report
from .operators import appendix_a_catalog
from .pipeline import OperatorSignature, PipelinePrototype, appendix_a_prototype, pipeline_space
from .twostage import DEFAULT_EPSILON, BudgetClock, Policy, RunReport, WorkflowObjective, derive_seed, run

SCHEMA = "wfopt.experiment/1"
EXHAUSTIVE_LIMIT = 100_000
DATA_DIR = Path(__file__).with_name("data")
BUILTIN_DATASETS = ("iris", "wine", "breast")


class DatasetError(ValueError):
    pass


# -- datasets -------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.X.ndim != 2 or self.X.shape[0] != len(self.y):
            raise DatasetError("X must be 2-D with one label per row")
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("dataset contains missing or non-finite values")
        if len(np.unique(self.y)) < 2:
            raise DatasetError("dataset needs at least two classes")

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape

    @property
    def n_classes(self) -> int:
        return len(np.unique(self.y))


def load_dataset(ref: str | Path | Mapping[str, Any], label: str = "label") -> Dataset:
    """Load a bundled dataset by name or a CSV with a header row and a label column."""
    if isinstance(ref, Mapping):
        return load_dataset(ref["path"], ref.get("label", label))
    if str(ref) in BUILTIN_DATASETS:
        return _read_csv(DATA_DIR / f"{ref}.csv", "label", str(ref))
    path = Path(ref)
    if not path.exists():
        raise DatasetError(f"no dataset named {str(ref)!r} and no such file")
    return _read_csv(path, label, path.stem)


def _read_csv(path: Path, label: str, name: str) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label not in header:
        raise DatasetError(f"{path}: no label column {label!r} in header")
    li = header.index(label)
    features = tuple(h for i, h in enumerate(header) if i != li)
    X, y = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        if row[li].strip() == "":
            raise DatasetError(f"{path}: row {r}, column {label!r}: missing label")
        vals = []
        for i, cell in enumerate(row):
            if i == li:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: row {r}, column {header[i]!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise DatasetError(f"{path}: row {r}, column {header[i]!r}: non-finite value {cell!r}")
            vals.append(v)
        X.append(vals)
        y.append(row[li].strip())
    if not X:
        raise DatasetError(f"{path}: no data rows")
    labels = np.asarray(y)
    try:
        labels = labels.astype(int)
    except ValueError:
        pass
    return Dataset(name, np.asarray(X, dtype=float), labels, features)


# -- experiment files -----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Any = "iris"
    learner: str = "decision-tree"
    prototype: Any = "appendix-a"
    optimizers: Mapping[str, OptimizerSettings] = field(default_factory=dict)
    policy: Policy = field(default_factory=lambda: Policy("split", omega=0.5))
    budget_mode: str = "evals"
    budget_total: float = 100.0
    cv_folds: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget_mode not in ("evals", "wall"):
            raise ValueError(f"budget mode must be 'evals' or 'wall', got {self.budget_mode!r}")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> ExperimentConfig:
        schema = doc.get("schema")
        if schema != SCHEMA:
            raise ValueError(f"unsupported experiment schema {schema!r}; expected {SCHEMA!r}")
        policy_doc = dict(doc.get("policy", {"kind": "split", "omega": 0.5}))
        policy_doc.setdefault("epsilon", doc.get("cauchy_epsilon", DEFAULT_EPSILON))
        budget = doc.get("budget", {})
        return cls(
            dataset=doc.get("dataset", "iris"),
            learner=doc.get("learner", "decision-tree"),
            prototype=doc.get("prototype", "appendix-a"),
            optimizers={k: OptimizerSettings.from_json(v) for k, v in doc.get("optimizers", {}).items()},
            policy=Policy.from_json(policy_doc),
            budget_mode=budget.get("mode", "evals"),
            budget_total=float(budget.get("total", 100)),
            cv_folds=int(doc.get("cv_folds", 10)),
            seed=int(doc.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "dataset": self.dataset,
            "learner": self.learner,
            "prototype": self.prototype,
            "optimizers": {k: v.to_json() for k, v in self.optimizers.items()},
            "policy": self.policy.to_json(),
            "budget": {"mode": self.budget_mode, "total": self.budget_total},
            "cv_folds": self.cv_folds,
            "cauchy_epsilon": self.policy.to_json()["epsilon"],
            "seed": self.seed,
        }

    def with_overrides(self, *, seed: int | None = None, budget_mode: str | None = None,
                       budget_total: float | None = None, policy: Policy | None = None) -> ExperimentConfig:
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if budget_mode is not None:
            changes["budget_mode"] = budget_mode
        if budget_total is not None:
            changes["budget_total"] = budget_total
        if policy is not None:
            changes["policy"] = policy
        return replace(self, **changes)

    # assembled components

    def load_dataset(self) -> Dataset:
        return load_dataset(self.dataset)

    def build(self, dataset: Dataset | None = None) -> tuple[PipelinePrototype, dict[str, OperatorSignature], LearnerSpec]:
        dataset = dataset or self.load_dataset()
        if self.prototype == "appendix-a":
            proto = appendix_a_prototype()
        elif isinstance(self.prototype, Mapping):
            proto = PipelinePrototype.from_json(self.prototype)
        else:
            raise ValueError(f"unknown prototype {self.prototype!r}")
        return proto, appendix_a_catalog(dataset.X.shape[1]), learner_spec(self.learner)

    def objective(self, dataset: Dataset | None = None, seed: int | None = None) -> WorkflowObjective:
        dataset = dataset or self.load_dataset()
        proto, catalog, spec = self.build(dataset)
        return WorkflowObjective(proto, catalog, spec, dataset.X, dataset.y, self.cv_folds,
                                 self.seed if seed is None else seed)


def run_experiment(config: ExperimentConfig, objective: WorkflowObjective | None = None) -> RunReport:
    objective = objective or config.objective()
    clock = BudgetClock(config.budget_mode, config.budget_total)
    return run(config.policy, objective, clock, config.seed, config.optimizers)


def space_summary(config: ExperimentConfig) -> dict:
    """Cardinalities of the pipeline space, each layer, the algorithm space and their product."""
    dataset = config.load_dataset()
    proto, catalog, spec = config.build(dataset)
    space = pipeline_space(proto, catalog)
    layers = {}
    for layer in proto.layers:
        slot_ids = [s.id for s in proto.slots if s.layer == layer]
        dims = tuple(d for d in space.dims
                     if d.name in slot_ids or any(d.name.startswith(sid + ".") for sid in slot_ids))
        names = {d.name for d in dims}
        conds = tuple(c for c in space.conditions if c.child in names)
        layers[layer] = ConfigSpace(dims, conds, name=layer).cardinality()
    pipe_n, algo_n = space.cardinality(), spec.space.cardinality()
    return {"pipeline": pipe_n, "layers": layers, "algorithm": algo_n, "algorithm_grid": GRID_LABEL,
            "joint": pipe_n * algo_n}


# -- density study ----------------------------------------------------------------


@dataclass(frozen=True)
class DensityRow:
    trial: int
    config_id: int
    config: Configuration
    loss: float
    score: float | None
    error: str | None

    @property
    def incompatible(self) -> bool:
        return not math.isfinite(self.loss)


@dataclass(frozen=True)
class DensityResult:
    """Pipeline scores with the algorithm at its default configuration.

    ``first_improvement`` and ``evals_to_best`` count trials after the
    baseline (trial 0) in evaluation order; ``first_improvement`` is ``None``
    when nothing beat the baseline.
    """

    mode: str
    rows: tuple[DensityRow, ...]
    baseline_score: float
    best_score: float
    best_config: Configuration
    first_improvement: int | None
    evals_to_best: int

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.rows if not r.incompatible], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["trial", "config_id", "score", "loss", "incompatible", "config"])
        for r in self.rows:
            w.writerow([
                r.trial,
                r.config_id,
                "" if r.score is None else repr(r.score),
                "inf" if r.incompatible else repr(r.loss),
                int(r.incompatible),
                r.config.key(),
            ])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "algorithm_grid": GRID_LABEL,
            "n_rows": len(self.rows),
            "n_incompatible": sum(r.incompatible for r in self.rows),
            "baseline_score": self.baseline_score,
            "best_score": self.best_score,
            "best_config": self.best_config.to_json(),
            "first_improvement": self.first_improvement,
            "evals_to_best": self.evals_to_best,
        }


def density_study(
    config: ExperimentConfig,
    exhaustive: bool = False,
    budget: int = 100,
    objective: WorkflowObjective | None = None,
    optimizer: OptimizerSettings | None = None,
    optimizer_seed: int | None = None,
) -> DensityResult:
    """Score pipelines with the default algorithm configuration.

    Exhaustive mode scores every pipeline in enumeration order (guarded at
    100 000 points); budget mode evaluates the baseline then ``budget``
    optimizer suggestions.
    """
    objective = objective or config.objective()
    space = objective.pipeline_space
    algo = objective.default_algo
    rows: list[DensityRow] = []

    def score(trial: int, cfg: Configuration) -> DensityRow:
        ev = objective.evaluate(cfg, algo)
        row = DensityRow(trial, _config_id(space, cfg), cfg, ev.loss, ev.score, ev.error)
        rows.append(row)
        return row

    if exhaustive:
        n = space.cardinality()
        if n > EXHAUSTIVE_LIMIT:
            raise ValueError(f"pipeline space has {n} points (> {EXHAUSTIVE_LIMIT}); use budget mode instead")
        base = objective.evaluate(objective.baseline_pipeline, algo)
        for i, cfg in enumerate(space.enumerate()):
            score(i, cfg)
        baseline_loss = base.loss
        ordered = rows
    else:
        if budget < 0:
            raise ValueError("budget must be non-negative")
        settings = optimizer or config.optimizers.get("pipeline", OptimizerSettings())
        seed = derive_seed(config.seed if optimizer_seed is None else optimizer_seed, "density-optimizer")
        opt = make_optimizer(settings, np.random.default_rng(seed))
        history = History()
        for i in range(budget + 1):
            cfg = objective.baseline_pipeline if i == 0 else opt.suggest(space, history)
            row = score(i, cfg)
            history.observe(Trial(cfg, row.loss, "pipeline", float(i + 1), i))
        baseline_loss = rows[0].loss
        ordered = rows[1:]

    best_loss, best_cfg, best_at, first = baseline_loss, objective.baseline_pipeline, 0, None
    for k, r in enumerate(ordered, start=1):
        if r.incompatible:
            continue
        if first is None and r.loss < baseline_loss:
            first = k
        if r.loss < best_loss:
            best_loss, best_cfg, best_at = r.loss, r.config, k
    return DensityResult(
        mode="exhaustive" if exhaustive else f"budget({budget})",
        rows=tuple(rows),
        baseline_score=1.0 - baseline_loss,
        best_score=1.0 - best_loss,
        best_config=best_cfg,
        first_improvement=first,
        evals_to_best=best_at,
    )


def _config_id(space: ConfigSpace, cfg: Configuration) -> int:
    """Stable integer id: the mixed-radix reading of the enumeration order key."""
    ident = 0
    for d, k in zip(space.dims, space.order_key(cfg)):
        ident = ident * (d.size + 1) + k
    return ident


# -- policy comparison ------------------------------------------------------------------


@dataclass(frozen=True)
class CompareResult:
    reports: Mapping[tuple[str, int], RunReport]

    def curves_csv(self) -> str:
        """Best score against budget consumed, one row per trial."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["policy", "seed", "eval_index", "phase", "clock", "best_score"])
        for (label, seed), rep in self.reports.items():
            best = math.inf
            for t in rep.trials:
                if t.finite and t.loss < best:
                    best = t.loss
                w.writerow([label, seed, t.eval_index, t.phase, repr(t.clock),
                            "" if math.isinf(best) else repr(1.0 - best)])
        return buf.getvalue()

    def visited_csv(self) -> str:
        """Number of configurations visited per run, total and per phase."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["policy", "seed", "visited", "pipeline", "algorithm", "joint", "best_score"])
        for (label, seed), rep in self.reports.items():
            counts = rep.phase_counts()
            w.writerow([label, seed, len(rep.trials), counts.get("pipeline", 0), counts.get("algorithm", 0),
                        counts.get("joint", 0), repr(rep.best_score)])
        return buf.getvalue()


def policy_compare(
    config: ExperimentConfig,
    policies: Sequence[Policy],
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
) -> CompareResult:
    """Run every (policy, seed) pair; optionally write traces, summaries and CSVs.

    In eval-count mode runs with the same seed share one objective so
    repeated evaluations are computed once; wall-clock runs each get a fresh
    objective so no run benefits from another's cache.
    """
    dataset = config.load_dataset()
    reports: dict[tuple[str, int], RunReport] = {}
    for seed in seeds:
        shared = config.objective(dataset, seed) if config.budget_mode == "evals" else None
        for pol in policies:
            cfg = config.with_overrides(seed=seed, policy=pol)
            obj = shared or cfg.objective(dataset)
            reports[(pol.label(), seed)] = run_experiment(cfg, obj)
    result = CompareResult(reports)
    if out_dir is not None:
        write_compare(result, Path(out_dir))
    return result


def write_compare(result: CompareResult, out: Path) -> None:
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for (label, seed), rep in result.reports.items():
        stem = f"{_safe(label)}_seed{seed}"
        write_report(rep, out / "traces" / f"{stem}.jsonl", out / "traces" / f"{stem}.summary.json")
    write_text(out / "curves.csv", result.curves_csv())
    write_text(out / "visited.csv", result.visited_csv())


def write_report(rep: RunReport, trace_path: Path, summary_path: Path) -> None:
    write_text(trace_path, "".join(line + "\n" for line in rep.trace_lines()))
    write_text(summary_path, json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n")


def _safe(label: str) -> str:
    return label.replace("(", "-").replace(")", "").replace(".", "p")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def replay_best(trace_lines: Sequence[str]) -> tuple[float, dict | None]:
    """Recompute (best loss, best config) from JSONL trace lines alone."""
    best, cfg = math.inf, None
    for line in trace_lines:
        rec = json.loads(line)
        if rec["loss"] is not None and rec["loss"] < best:
            best, cfg = rec["loss"], rec["config"]
    return best, cfg


# -- NMAD ------------------------------------------------------------------------------


def nmad_report(ref: str | Path) -> NmadReport:
    """Ranked NMAD table for a fixture file or a bundled fixture name."""
    path = Path(ref)
    if not path.exists() and str(ref) in ("echr", "newsgroup"):
        path = fixture_path(str(ref))
    return report(OptimalSet.load(path))
