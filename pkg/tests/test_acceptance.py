"""End-to-end acceptance suite.

Each test reports one ``criterion N: PASS|FAIL`` line, printed in the
terminal summary, and enforces the pinned tolerances and runtime limits.
"""
import contextlib
import functools
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from wfopt.cli import main
from wfopt.configspace import ConfigSpace, Configuration, integer, real, union_space
from wfopt.errors import IncompatibilityError
from wfopt.harness import ExperimentConfig, density_study, load_dataset
from wfopt.metaopt import History, OptimizerSettings, Trial, make_optimizer
from wfopt.nmad import OptimalSet, fixture_path, report
from wfopt.operators import IDENTITY, appendix_a_catalog, custom_operator, pca_fit, select_k_best_fit, smote_fit, standard_scaler_fit
from wfopt.pipeline import (
    CLASS_VECTOR,
    PipelineInstance,
    PipelinePrototype,
    Slot,
    appendix_a_prototype,
    check_compatibility,
    pipeline_space,
)
from wfopt.twostage import (
    AdaptiveState,
    BudgetClock,
    Policy,
    SyntheticObjective,
    WorkflowObjective,
    adaptive_update,
    run,
)

EXPERIMENT = Path(__file__).resolve().parents[1] / "experiments" / "iris_decision_tree.json"

ECHR = {(5, 50000): 0.0, (3, 10000): 0.275, (4, 10000): 0.213, (3, 50000): 0.175, (4, 50000): 0.094}
NEWSGROUP = {(4, 5000): 0.306, (4, 100000): 0.300, (5, 50000): 0.356, (3, 10000): 0.294, (2, 100000): 0.362}


@contextlib.contextmanager
def _criterion(log, n, title, limit_s):
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - start
        assert elapsed <= limit_s, f"runtime {elapsed:.1f}s exceeds {limit_s}s"
    except BaseException as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        log.append(f"criterion {n}: FAIL  {title}  ({reason})")
        raise
    extra = "  ".join(f"{k}={v}" for k, v in detail.items())
    log.append(f"criterion {n}: PASS  {title}  [{elapsed:.1f}s] {extra}")


@pytest.fixture
def criterion(acceptance_log):
    return functools.partial(_criterion, acceptance_log)


@pytest.fixture(scope="module")
def iris_experiment():
    return ExperimentConfig.load(EXPERIMENT)


@pytest.fixture(scope="module")
def iris_objective(iris_experiment):
    """One shared Iris/decision-tree objective, so exhaustive scores are reused by later criteria."""
    return iris_experiment.objective()


@pytest.fixture(scope="module")
def iris_exhaustive(iris_experiment, iris_objective):
    start = time.perf_counter()
    res = density_study(iris_experiment, exhaustive=True, objective=iris_objective)
    return res, time.perf_counter() - start


class TestAcceptance:
    def test_01_nmad_golden_tables(self, criterion):
        with criterion(1, "NMAD golden tables within 0.001", 1.0) as d:
            for name, expected in (("echr", ECHR), ("newsgroup", NEWSGROUP)):
                got = report(OptimalSet.load(fixture_path(name))).as_dict()
                assert set(got) == set(expected)
                for point, value in expected.items():
                    assert abs(got[point] - value) <= 0.001, (name, point, got[point])
                d[name] = len(got)

    def test_02_cardinality(self, criterion):
        with criterion(2, "pipeline space 4750, normalize layer 19", 1.0) as d:
            catalog = appendix_a_catalog(4)
            assert pipeline_space(appendix_a_prototype(), catalog).cardinality() == 4750
            slot = Slot("normalize", "normalize", ("StandardScaler", "PowerTransformer", "MinMaxScaler", "RobustScaler"))
            proto = PipelinePrototype("normalize-only", (slot,), (), (("source", "normalize"), ("normalize", "sink")),
                                      ("normalize",))
            assert pipeline_space(proto, catalog).cardinality() == 19
            d["pipelines"], d["normalize"] = 4750, 19

    def test_03_iris_improves_on_baseline(self, criterion, iris_experiment, iris_objective, iris_exhaustive):
        with criterion(3, "exhaustive best >= baseline; TPE beats baseline within 100 evals in >= 9/10 seeds", 900) as d:
            exhaustive, exhaustive_s = iris_exhaustive
            assert len(exhaustive.rows) == 4750
            assert exhaustive.best_score >= exhaustive.baseline_score
            hits = []
            for seed in range(10):
                res = density_study(iris_experiment, budget=100, objective=iris_objective,
                                    optimizer=OptimizerSettings("tpe"), optimizer_seed=seed)
                hits.append(res.first_improvement)
            wins = sum(h is not None and h <= 100 for h in hits)
            d.update(baseline=round(exhaustive.baseline_score, 4), best=round(exhaustive.best_score, 4),
                     first_improvement=hits, exhaustive_s=round(exhaustive_s))
            assert wins >= 9, hits

    def test_04_tpe_skews_to_better_configs(self, criterion, iris_experiment, iris_objective, iris_exhaustive):
        with criterion(4, "TPE-visited mean score > random-visited mean in >= 8/10 paired seeds", 1200) as d:
            def mean_visited(kind, seed):
                res = density_study(iris_experiment, budget=100, objective=iris_objective,
                                    optimizer=OptimizerSettings(kind), optimizer_seed=seed)
                visited = [r.score for r in res.rows[1:] if not r.incompatible]
                return float(np.mean(visited))

            pairs = [(mean_visited("tpe", s), mean_visited("random", s)) for s in range(10)]
            wins = sum(t > r for t, r in pairs)
            d["wins"] = wins
            d["mean_gap"] = round(float(np.mean([t - r for t, r in pairs])), 4)
            assert wins >= 8, pairs

    def test_05_planted_optimum(self, criterion):
        with criterion(5, "planted 64-point optimum: TPE median evals <= random median over 50 seeds", 60) as d:
            space = ConfigSpace(tuple(integer(n, (0, 1, 2, 3)) for n in ("a", "b", "c")))
            target = {"a": 2, "b": 1, "c": 3}

            def loss(cfg):
                return sum(abs(cfg[k] - v) for k, v in target.items()) / 9.0

            def evals_to_optimum(kind, seed, cap=2000):
                opt = make_optimizer(OptimizerSettings(kind), np.random.default_rng(seed))
                history = History()
                for i in range(cap):
                    cfg = opt.suggest(space, history)
                    value = loss(cfg)
                    history.observe(Trial(cfg, value, "pipeline", float(i), i))
                    if value == 0.0:
                        return i + 1
                return cap

            assert sum(loss(c) == 0.0 for c in space.enumerate()) == 1
            tpe = [evals_to_optimum("tpe", s) for s in range(50)]
            rnd = [evals_to_optimum("random", 1000 + s) for s in range(50)]
            d["tpe_median"], d["random_median"] = float(np.median(tpe)), float(np.median(rnd))
            assert np.median(tpe) <= np.median(rnd)

    def test_06_policy_mechanics(self, criterion):
        with criterion(6, "split ledgers, iterative alternation, adaptive replay, joint product space", 60) as d:
            pipe = ConfigSpace((integer("p", tuple(range(6))), integer("q", (0, 1, 2))))
            algo = ConfigSpace((real("C", (0.1, 1.0, 10.0)), integer("depth", (1, 2, 3, 4))))
            obj = SyntheticObjective(pipe, algo, lambda g, a: ((g["p"] - 3) ** 2 + g["q"] + abs(a["depth"] - 2)) / 40
                                     + (0.01 if a["C"] != 1.0 else 0.0))
            n = 50

            def go(policy, total=n, seed=0):
                return run(policy, obj, BudgetClock("evals", total), seed)

            assert go(Policy("split", omega=0.0)).ledger == {"pipeline": float(n)}
            assert go(Policy("split", omega=1.0)).ledger == {"algorithm": float(n)}

            phases = [s.phase for s in go(Policy("iterative", slice=5)).slices]
            assert phases[0] == "pipeline" and all(a != b for a, b in zip(phases, phases[1:]))

            joint = go(Policy("joint"))
            product = union_space(pipe, algo)
            assert {t.phase for t in joint.trials} == {"joint"}
            assert product.cardinality() == pipe.cardinality() * algo.cardinality()
            assert all(product.is_valid(t.config) for t in joint.trials)

            # independent simulation of the doubling and halving rules
            rng = np.random.default_rng(0)
            for _ in range(1000):
                t0, total = float(rng.choice([1, 3, 15])), float(rng.choice([20, 100, 300]))
                j_max = math.floor(math.log2(max(total, t0) / t0) + 1e-12)
                state, j, misses = AdaptiveState.initial(t0, total), 0, 0
                for ok in rng.random(int(rng.integers(1, 30))) < rng.random():
                    state = adaptive_update(state, "algorithm", bool(ok))
                    if ok:
                        j, misses = min(j + 1, j_max), 0
                    else:
                        misses += 1
                        if misses == 2:
                            j, misses = max(j - 1, -3), 0
                    assert state.slices["algorithm"] == t0 * 2.0**j
            replayed = 0
            for seed in range(5):
                rep = go(Policy("adaptive", slice=3), 120, seed)
                state = AdaptiveState.initial(3, 120)
                for s in rep.slices:
                    assert s.allotted == state.slices[s.phase]
                    state = adaptive_update(state, s.phase, s.improved)
                    replayed += 1
            d["adaptive_slices_replayed"] = replayed

    def test_07_warm_start_and_cauchy(self, criterion):
        with criterion(7, "inner loops warm-start from previous best; epsilon=inf gives 2 evaluations", 60) as d:
            pipe = ConfigSpace((integer("p", tuple(range(8))),))
            algo = ConfigSpace((integer("a", tuple(range(10))), integer("b", tuple(range(10)))))
            obj = SyntheticObjective(pipe, algo, lambda g, a: abs(g["p"] - 5) / 10 + ((a["a"] * 7 + a["b"] * 3) % 11) / 20)
            checked = 0
            for policy in (Policy("iterative", slice=6), Policy("adaptive", slice=4), Policy("split", omega=0.5)):
                rep = run(policy, obj, BudgetClock("evals", 90), 1)
                best_loss, best_algo, seen = math.inf, None, set()
                for t in rep.trials:
                    slice_index = t.info["slice"]
                    if t.phase == "algorithm" and slice_index not in seen and best_algo is not None:
                        assert rep.split_config(t.config)[1] == best_algo
                        checked += 1
                    seen.add(slice_index)
                    if t.finite and t.loss < best_loss:
                        best_loss, best_algo = t.loss, rep.split_config(t.config)[1]
            assert checked >= 3
            rep = run(Policy("iterative", slice=6, epsilon=math.inf), obj, BudgetClock("evals", 61), 0)
            algo_slices = [s for s in rep.slices if s.phase == "algorithm"]
            sizes = [sum(t.info["slice"] == s.index for t in rep.trials) for s in algo_slices]
            assert all(k == 2 for k in sizes[:-1]) and sizes[-1] in (1, 2)
            d["warm_starts_checked"], d["inner_loops"] = checked, len(sizes)

    def test_08_operator_invariants(self, criterion):
        with criterion(8, "scaler, PCA, SMOTE and SelectKBest invariants", 120) as d:
            rng = np.random.default_rng(8)
            for _ in range(50):
                X = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), size=(int(rng.integers(5, 60)), 4))
                Z = standard_scaler_fit(X).transform(X)
                assert np.max(np.abs(Z.mean(axis=0))) <= 1e-9
                assert np.max(np.abs(Z.std(axis=0) - 1)) <= 1e-9
                f = pca_fit(X, int(rng.integers(1, 5)))
                C = f.params["components"]
                assert np.max(np.abs(C @ C.T - np.eye(len(C)))) <= 1e-8
                assert np.all(np.diff(f.params["explained_variance"]) <= 0)
            for _ in range(20):
                sizes = (int(rng.integers(20, 40)), int(rng.integers(3, 10)), int(rng.integers(3, 10)))
                X = np.vstack([rng.normal(3 * i, 1, size=(s, 3)) for i, s in enumerate(sizes)])
                y = np.repeat(np.arange(3), sizes)
                Xs, ys, fitted = smote_fit(X, y, 2, rng)
                assert fitted is IDENTITY and len(set(np.unique(ys, return_counts=True)[1])) == 1
                for c in np.unique(ys[len(X):]):
                    pts = Xs[len(X):][ys[len(X):] == c]
                    assert np.all(pts >= X[y == c].min(axis=0) - 1e-12)
                    assert np.all(pts <= X[y == c].max(axis=0) + 1e-12)
            for _ in range(100):
                n, dims = int(rng.integers(8, 30)), int(rng.integers(2, 7))
                X = rng.normal(size=(n, dims))
                y = np.arange(n) % int(rng.integers(2, 4))
                k = int(rng.integers(1, dims + 1))
                ref = [stats.f_oneway(*(X[y == c, j] for c in np.unique(y))).statistic for j in range(dims)]
                best = max(itertools.combinations(range(dims), k), key=lambda s: sum(ref[j] for j in s))
                assert sorted(select_k_best_fit(X, y, k).params["indices"].tolist()) == list(best)
            d["selectkbest_fixtures"] = 100

    def test_09_incompatibility(self, criterion):
        with criterion(9, "static type mismatch rejected; PCA k > features is +inf, traced, never best", 10) as d:
            def fit(X, y, params, rng):
                return y.reshape(-1, 1).astype(float), y, IDENTITY

            catalog = {**appendix_a_catalog(4),
                       "Labeler": custom_operator("Labeler", ConfigSpace(()), fit, output_kind=CLASS_VECTOR)}
            slots = (Slot("s0", "l0", ("Labeler",)), Slot("s1", "l1", ("MinMaxScaler",)))
            proto = PipelinePrototype("chain", slots, (), (("source", "s0"), ("s0", "s1"), ("s1", "sink")), ("l0", "l1"))
            inst = PipelineInstance.from_config(proto, {"s0": "Labeler", "s1": "MinMaxScaler"})
            assert check_compatibility(proto, inst, catalog) is not None

            iris = load_dataset("iris")
            obj = WorkflowObjective(appendix_a_prototype(), appendix_a_catalog(8), _dt(), iris.X, iris.y, 5, seed=0)
            too_big = Configuration({**obj.baseline_pipeline, "features.pca": "PCA", "features.pca.PCA.k": 8})
            assert math.isinf(obj.evaluate(too_big, obj.default_algo).loss)
            with pytest.raises(IncompatibilityError):
                pca_fit(iris.X, 8)
            rep = run(Policy("split", omega=0.0), obj, BudgetClock("evals", 30), 0,
                      {"pipeline": OptimizerSettings("random")})
            lines = [json.loads(l) for l in rep.trace_lines()]
            bad = [l for l in lines if l["config"]["pipeline"].get("features.pca.PCA.k", 0) > 4]
            assert bad and all(l["loss"] is None for l in bad)
            assert rep.best_pipeline.get("features.pca.PCA.k", 0) <= 4
            d["infinite_trials_in_trace"] = len(bad)

    def test_10_compare_determinism(self, criterion, tmp_path):
        with criterion(10, "two compare invocations give byte-identical JSONL", 120) as d:
            args = ["compare", str(EXPERIMENT), "--budget", "40", "--seeds", "0", "1",
                    "--policies", "split(0.5)", "iterative(10)", "adaptive(10)", "joint"]
            assert main(args + ["--out", str(tmp_path / "a")]) == 0
            assert main(args + ["--out", str(tmp_path / "b")]) == 0
            files = sorted(p.name for p in (tmp_path / "a" / "traces").glob("*.jsonl"))
            assert len(files) == 8
            for name in files:
                assert (tmp_path / "a" / "traces" / name).read_bytes() == (tmp_path / "b" / "traces" / name).read_bytes()
            d["traces"] = len(files)


def _dt():
    from wfopt.learners import learner_spec

    return learner_spec("decision-tree")
