import json
import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfopt.configspace import ConfigSpace, categorical, integer, real, union_space
from wfopt.learners import cross_val_score, learner_spec
from wfopt.operators import appendix_a_catalog
from wfopt.pipeline import PipelineInstance, appendix_a_prototype
from wfopt.twostage import (
    AdaptiveState,
    BudgetClock,
    Policy,
    SyntheticObjective,
    WorkflowObjective,
    adaptive_update,
    cauchy_stop,
    derive_seed,
    run,
    split_schedule,
)

PIPE = ConfigSpace((categorical("scale", ("none", "std", "bad")), integer("k", (1, 2, 3, 4)),
                    categorical("sample", ("none", "up", "down"))))
ALGO = ConfigSpace((real("C", (0.01, 0.1, 1.0, 10.0, 100.0)), integer("depth", (1, 2, 3, 4, 5, 6))))


def hashed_loss(pipe, algo):
    if pipe["scale"] == "bad":
        return math.inf
    h = zlib.crc32((pipe.key() + "|" + algo.key()).encode())
    return 0.05 + 0.9 * (h % 100_003) / 100_003


def synthetic():
    return SyntheticObjective(PIPE, ALGO, hashed_loss)


def go(policy, total, seed=0, obj=None):
    return run(policy, obj or synthetic(), BudgetClock("evals", total), seed)


def pipeline_part(report, trial):
    return report.split_config(trial.config)


POLICIES = [Policy("split", omega=0.0), Policy("split", omega=0.3), Policy("split", omega=1.0),
            Policy("iterative", slice=4), Policy("adaptive", slice=4), Policy("joint")]


class TestBudgetClock:
    def test_modes(self):
        with pytest.raises(ValueError):
            BudgetClock("cpu", 10)
        with pytest.raises(ValueError):
            BudgetClock("evals", -1)

    def test_eval_accounting(self):
        clock = BudgetClock("evals", 3)
        for phase in ("pipeline", "algorithm", "pipeline"):
            assert not clock.exhausted()
            clock.start_evaluation()
            clock.charge(phase)
        assert clock.exhausted() and clock.ledger == {"pipeline": 2.0, "algorithm": 1.0}
        assert clock.now() == 3.0

    def test_wall_overrun_is_at_most_one_evaluation(self):
        slow = SyntheticObjective(PIPE, ALGO, lambda p, a: (sum(range(20000)), hashed_loss(p, a))[1])
        rep = run(Policy("iterative", slice=0.01), slow, BudgetClock("wall", 0.05), 0)
        clocks = [0.0] + [t.clock for t in rep.trials]
        longest = max(b - a for a, b in zip(clocks, clocks[1:]))
        assert sum(rep.ledger.values()) <= 0.05 + longest
        assert len(rep.trials) > 1


class TestPolicy:
    def test_parse_and_label(self):
        for text in ("split(0.5)", "iterative(15)", "adaptive(15)", "joint"):
            assert Policy.parse(text).label() == text

    def test_validation(self):
        with pytest.raises(ValueError):
            Policy("split", omega=1.5)
        with pytest.raises(ValueError):
            Policy("iterative", slice=0)
        with pytest.raises(ValueError):
            Policy("halving")

    def test_json_roundtrip(self):
        p = Policy("adaptive", slice=7.5, epsilon=math.inf)
        assert Policy.from_json(json.loads(json.dumps(p.to_json()))) == p


class TestSplitSchedule:
    @pytest.mark.parametrize("omega,expected", [(0.0, (300, 0)), (0.5, (150, 150)), (1.0, (0, 300))])
    def test_examples(self, omega, expected):
        assert split_schedule(omega, 300) == expected

    def test_integral(self):
        assert split_schedule(0.3, 7, integral=True) == (5.0, 2.0)

    def test_bad_omega(self):
        with pytest.raises(ValueError):
            split_schedule(-0.1, 10)


def simulate_slices(t0, total, seq):
    """Straight-line replay: exponent j moves up on success and down after two failures."""
    j_max = math.floor(math.log2(max(total, t0) / t0) + 1e-12)
    j, misses, out = 0, 0, []
    for ok in seq:
        if ok:
            j, misses = min(j + 1, j_max), 0
        else:
            misses += 1
            if misses == 2:
                j, misses = max(j - 1, -3), 0
        out.append(t0 * 2.0**j)
    return out


class TestAdaptiveUpdate:
    def test_examples(self):
        s = AdaptiveState.initial(15, 300)
        assert adaptive_update(s, "pipeline", True).slices["pipeline"] == 30
        s2 = adaptive_update(adaptive_update(s, "pipeline", False), "pipeline", False)
        assert s2.slices["pipeline"] == 7.5
        s3 = adaptive_update(adaptive_update(s, "pipeline", False), "pipeline", True)
        assert s3.slices["pipeline"] == 30 and s3.counters["pipeline"] == 0
        assert s3.slices["algorithm"] == 15

    def test_bounds(self):
        s = AdaptiveState.initial(15, 300)
        for _ in range(10):
            s = adaptive_update(s, "algorithm", True)
        assert s.slices["algorithm"] == 240
        for _ in range(20):
            s = adaptive_update(s, "algorithm", False)
        assert s.slices["algorithm"] == 15 / 8

    def test_replay_thousand_sequences(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            t0 = float(rng.choice([1, 2.5, 15]))
            total = float(rng.choice([10, 60, 300]))
            seq = rng.random(int(rng.integers(1, 40))) < rng.random()
            s = AdaptiveState.initial(t0, total)
            got = []
            for ok in seq:
                s = adaptive_update(s, "pipeline", bool(ok))
                got.append(s.slices["pipeline"])
                j = math.log2(got[-1] / t0)
                assert j == round(j)
            assert got == simulate_slices(t0, total, seq)


class TestCauchy:
    def test_rule(self):
        assert cauchy_stop(0.2, 0.2, 1e-4)
        assert not cauchy_stop(0.2, 0.1, 1e-4)
        assert cauchy_stop(0.2, 0.1, math.inf)
        assert not cauchy_stop(math.inf, 0.3, 1e-4)


class TestRunInvariants:
    @pytest.mark.parametrize("total", [0, 1])
    def test_degenerate_budget_is_baseline_only(self, total):
        for pol in POLICIES:
            rep = go(pol, total)
            assert len(rep.trials) == 1
            t = rep.trials[0]
            pipe, algo = pipeline_part(rep, t)
            assert pipe == PIPE.default_configuration() and algo == ALGO.default_configuration()

    @pytest.mark.parametrize("policy", POLICIES, ids=lambda p: p.label())
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_accounting_and_best(self, policy, seed):
        rep = go(policy, 37, seed)
        assert len(rep.trials) <= 37
        assert sum(rep.ledger.values()) == len(rep.trials)
        assert [t.eval_index for t in rep.trials] == list(range(len(rep.trials)))
        assert rep.trials[0].loss >= rep.best_loss
        finite = [t.loss for t in rep.trials if t.finite]
        assert rep.best_loss == min(finite)
        first_best = next(t for t in rep.trials if t.loss == rep.best_loss)
        assert pipeline_part(rep, first_best) == (rep.best_pipeline, rep.best_algo)
        # the reported best is reproducible from its configuration
        assert hashed_loss(rep.best_pipeline, rep.best_algo) == rep.best_loss

    def test_split_ledgers(self):
        eps0 = dict(epsilon=0.0)
        assert go(Policy("split", omega=0.0, **eps0), 30).ledger == {"pipeline": 30.0}
        rep = go(Policy("split", omega=1.0, **eps0), 30)
        assert rep.ledger == {"algorithm": 30.0}
        assert all(pipeline_part(rep, t)[0] == PIPE.default_configuration() for t in rep.trials)
        assert go(Policy("split", omega=0.5, **eps0), 30).ledger == {"pipeline": 15.0, "algorithm": 15.0}

    def test_split_one_ledger_with_default_epsilon(self):
        # Cauchy stops restart the inner loop, so the algorithm phase still uses the whole budget
        assert go(Policy("split", omega=1.0), 25).ledger == {"algorithm": 25.0}

    def test_iterative_two_slices(self):
        rep = go(Policy("iterative", slice=6, epsilon=0.0), 12)
        assert [(s.phase, s.consumed) for s in rep.slices] == [("pipeline", 6.0), ("algorithm", 6.0)]

    def test_iterative_alternates(self):
        rep = go(Policy("iterative", slice=3), 60)
        phases = [s.phase for s in rep.slices]
        assert phases[0] == "pipeline"
        assert all(a != b for a, b in zip(phases, phases[1:]))
        runs = [t.phase for t in rep.trials]
        blocks = [p for i, p in enumerate(runs) if i == 0 or runs[i - 1] != p]
        assert all(a != b for a, b in zip(blocks, blocks[1:]))

    def test_iterative_slice_count_bound(self):
        rep = go(Policy("iterative", slice=15, epsilon=0.0), 300)
        assert len(rep.slices) <= 20

    def test_joint_only_joint_trials(self):
        rep = go(Policy("joint"), 40)
        assert {t.phase for t in rep.trials} == {"joint"}
        u = union_space(PIPE, ALGO)
        assert u.cardinality() == PIPE.cardinality() * ALGO.cardinality()
        assert all(u.is_valid(t.config) for t in rep.trials)

    @pytest.mark.parametrize("policy", [Policy("iterative", slice=5), Policy("adaptive", slice=4),
                                        Policy("split", omega=0.6)], ids=lambda p: p.label())
    def test_warm_start(self, policy):
        rep = go(policy, 80, seed=3)
        algo_slices = [s for s in rep.slices if s.phase == "algorithm"]
        assert len(algo_slices) >= 2
        best_loss, best_algo = math.inf, None
        seen_slices = set()
        for t in rep.trials:
            sl = t.info["slice"]
            if t.phase == "algorithm" and sl not in seen_slices and best_algo is not None:
                assert pipeline_part(rep, t)[1] == best_algo
            seen_slices.add(sl)
            if t.finite and t.loss < best_loss:
                best_loss, best_algo = t.loss, pipeline_part(rep, t)[1]

    @pytest.mark.parametrize("policy", [Policy("iterative", slice=5, epsilon=math.inf),
                                        Policy("split", omega=1.0, epsilon=math.inf)], ids=lambda p: p.label())
    def test_infinite_epsilon_two_evaluations(self, policy):
        rep = go(policy, 41)
        algo_slices = [s for s in rep.slices if s.phase == "algorithm"]
        assert len(algo_slices) >= 3
        for s in algo_slices:
            n = sum(1 for t in rep.trials if t.info["slice"] == s.index)
            # only the final slice may be cut short by the budget
            assert n == 2 or (n == 1 and s is rep.slices[-1])
            assert s.stop == "cauchy" or s is rep.slices[-1]

    def test_slice_of_one_returns_prior(self):
        rep = go(Policy("iterative", slice=1), 20)
        for s in rep.slices:
            if s.phase == "algorithm":
                assert s.consumed == 1

    def test_single_pipeline_per_inner_loop(self):
        rep = go(Policy("adaptive", slice=4), 80)
        for s in rep.slices:
            if s.phase != "algorithm":
                continue
            pipes = {pipeline_part(rep, t)[0] for t in rep.trials if t.info["slice"] == s.index}
            assert len(pipes) == 1
            assert s.fingerprint == format(zlib.crc32(next(iter(pipes)).key().encode()), "08x")

    def test_adaptive_trace_replays(self):
        rep = go(Policy("adaptive", slice=4, epsilon=0.0), 200, seed=5)
        state = AdaptiveState.initial(4, 200)
        for s in rep.slices:
            assert s.allotted == state.slices[s.phase]
            state = adaptive_update(state, s.phase, s.improved)

    def test_incompatible_never_best(self):
        rep = go(Policy("joint"), 60)
        bad = [t for t in rep.trials if not t.finite]
        assert bad and rep.best_pipeline["scale"] != "bad"

    def test_trace_is_self_contained(self):
        rep = go(Policy("adaptive", slice=3), 50)
        best = min((json.loads(l)["loss"] for l in rep.trace_lines() if json.loads(l)["loss"] is not None))
        assert best == rep.summary()["best"]["loss"]

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(POLICIES), st.integers(0, 60), st.integers(0, 10_000))
    def test_budget_property(self, policy, total, seed):
        rep = go(policy, total, seed)
        assert len(rep.trials) == max(1, total)
        trace = []
        cur = math.inf
        for t in rep.trials:
            cur = min(cur, t.loss)
            trace.append(cur)
        assert all(b <= a for a, b in zip(trace, trace[1:]))


class TestWorkflowObjective:
    def test_best_matches_cross_validation(self, iris):
        proto, cat, spec = appendix_a_prototype(), appendix_a_catalog(4), learner_spec("decision-tree")
        obj = WorkflowObjective(proto, cat, spec, iris.X, iris.y, n_folds=5, seed=4)
        rep = run(Policy("iterative", slice=4), obj, BudgetClock("evals", 16), seed=1)
        res = cross_val_score(PipelineInstance.from_config(proto, rep.best_pipeline), cat, spec, rep.best_algo,
                              iris.X, iris.y, obj.folds, obj.fit_seed)
        assert res.loss == rep.best_loss

    def test_prepared_fingerprint_stable(self, iris):
        proto, cat, spec = appendix_a_prototype(), appendix_a_catalog(4), learner_spec("decision-tree")
        a = WorkflowObjective(proto, cat, spec, iris.X, iris.y, 5, seed=2)
        b = WorkflowObjective(proto, cat, spec, iris.X, iris.y, 5, seed=2)
        cfg = a.pipeline_space.sample(np.random.default_rng(0))
        assert a.prepare(cfg).fingerprint == b.prepare(cfg).fingerprint

    def test_derive_seed_components_differ(self):
        assert len({derive_seed(0, c) for c in ("folds", "fit", "pipeline-optimizer")}) == 3
        assert derive_seed(5, "fit") == derive_seed(5, "fit")
