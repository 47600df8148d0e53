"""跨模組性質：長序列下的正規化、暴力法對照、學習收斂、保護模式與可重現性"""

import time

import numpy as np
import pytest

from app.models.schemas import EngineConfig, ExperimentSpec, RequestStatus, Tier, load_scenario
from app.services.dispatcher import WeightBoard
from app.services.generative_model import (
    N_STATES,
    GenerativeModel,
    ObservationModel,
    TransitionModel,
    belief_predict,
    belief_update,
    evaluate_policies,
    softmax,
)
from app.services.harness import aggregate, build_report, check_directional, emit_report, run_experiment
from app.services.learning import (
    ReplayBuffer,
    TransitionRecord,
    update_observation_model_batch,
    update_transition_model,
)
from app.services.observation import RequestOutcome
from app.services.policy_engine import PolicyEngine
from app.services.simulator import EdgeSimulator
from app.utils.percentiles import nearest_rank

TRUE_B = np.array([
    [[0.9, 0.2], [0.1, 0.8]],
    [[0.3, 0.6], [0.7, 0.4]],
])


class TestLongRunNormalization:

    def test_belief_after_many_updates(self, rng):
        B = TransitionModel(rng.uniform(0.1, 2.0, size=(2, N_STATES, N_STATES)))
        b = np.full(N_STATES, 1.0 / N_STATES)
        for _ in range(100000):
            prior = belief_predict(b, B, int(rng.integers(2)))
            b = belief_update(prior, rng.uniform(0.05, 1.0, size=N_STATES))
        assert abs(b.sum() - 1.0) < 1e-9
        assert np.all(b >= 0)

    def test_models_stay_column_stochastic(self, rng):
        n = 6
        A = ObservationModel.uniform(n_states=n)
        B = TransitionModel.initial(n_actions=2, n_states=n)
        pairs = [((int(rng.integers(3)), int(rng.integers(3)), int(rng.integers(3)), int(rng.integers(2))),
                  rng.dirichlet(np.ones(n))) for _ in range(10000)]
        records = [TransitionRecord(rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n)), int(rng.integers(2)),
                                    (0, 0, 0, 0), float(rng.uniform(0, 30))) for _ in range(10000)]
        A = update_observation_model_batch(A, pairs, 0.05)
        B = update_transition_model(B, records, 0.05)
        for factor in A.normalized:
            np.testing.assert_allclose(factor.sum(axis=0), 1.0, atol=1e-9)
        np.testing.assert_allclose(B.normalized.sum(axis=1), 1.0, atol=1e-9)

    def test_softmax_shift_invariance(self, rng):
        x = rng.normal(size=20)
        np.testing.assert_allclose(softmax(x), softmax(x + 123.0), atol=1e-12)
        assert int(np.argmax(softmax(-x))) == int(np.argmin(x))

    def test_free_energy_non_negative_on_random_models(self, rng):
        for _ in range(50):
            A = ObservationModel(tuple(rng.uniform(0.01, 5.0, size=(b, N_STATES)) for b in (3, 3, 3, 2)))
            B = TransitionModel.initial()
            model = GenerativeModel(A=A, B=B)
            for g in evaluate_policies(rng.dirichlet(np.ones(N_STATES)), model):
                assert g.risk >= 0 and g.ambiguity >= 0 and g.cost >= 0


class TestBruteForceOracles:

    def test_belief_update(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 30))
            prior, like = rng.dirichlet(np.ones(n)), rng.uniform(0.0, 1.0, size=n)
            unnorm = [p * l for p, l in zip(prior, like)]
            expected = [u / sum(unnorm) for u in unnorm]
            np.testing.assert_allclose(belief_update(prior, like), expected, atol=1e-12, rtol=0)

    def test_nearest_rank(self, rng):
        for _ in range(100):
            values = rng.exponential(500.0, size=int(rng.integers(1, 300))).tolist()
            for pct in (50, 95):
                rank = (pct * len(values) + 99) // 100
                assert nearest_rank(values, pct) == sorted(values)[rank - 1]

    def test_success_rate_and_shares(self, rng):
        tiers, statuses = list(Tier), list(RequestStatus)
        for _ in range(100):
            outcomes = []
            for t in range(int(rng.integers(1, 200))):
                status = statuses[int(rng.integers(3))]
                latency = float(rng.uniform(1, 100)) if status == RequestStatus.SUCCESS else None
                outcomes.append(RequestOutcome(float(t), tiers[int(rng.integers(3))], status, latency))
            report = build_report(outcomes, "aif", 0, 1)
            ok = [o for o in outcomes if o.status == RequestStatus.SUCCESS]
            assert report.success_rate_pct == pytest.approx(100.0 * len(ok) / len(outcomes), abs=1e-12)
            for tier in tiers:
                n_tier = sum(1 for o in ok if o.tier == tier)
                expected = 100.0 * n_tier / len(ok) if ok else 0.0
                assert report.tier_share_pct[tier.value] == pytest.approx(expected, abs=1e-12)


class TestTransitionLearningConvergence:

    def test_two_state_world_default_rates(self, rng):
        buffer = ReplayBuffer(capacity=5000)
        s = 0
        for t in range(5000):
            a = int(rng.integers(2))
            s_next = int(rng.choice(2, p=TRUE_B[a, :, s]))
            buffer.append(TransitionRecord(np.eye(2)[s], np.eye(2)[s_next], a, (0, 0, 0, 0), 20.0, float(t)))
            s = s_next

        config = EngineConfig()
        B = TransitionModel.initial(n_actions=2, n_states=2,
                                    base=config.b_prior_base, diagonal=config.b_prior_diagonal)
        for _ in range(100):
            B = update_transition_model(B, buffer.sample(config.replay_batch_size, rng), alpha_b=config.alpha_b)
        l1 = np.abs(B.normalized - TRUE_B).sum(axis=1)
        assert l1.max() <= 0.1


class TestProtectiveModeScenario:

    @pytest.fixture(scope="class")
    def result(self, scenarios_dir):
        scenario = load_scenario(scenarios_dir / "light_fault.yaml")
        engine = PolicyEngine(scenario.engine_config(rng_seed=3), discretization=scenario.discretization)
        res = EdgeSimulator(scenario, WeightBoard(), engine, seed=3).run()
        return res, engine

    def test_switch_on_first_crossing(self, result):
        res, engine = result
        crossing = next(t for t, e in res.error_rate_history if e > 0.15)
        assert crossing >= 120.0
        assert res.mode_history[0] == (crossing, "protective")
        assert engine.model.C.with_mode("protective").components[3][-1] == pytest.approx(-11.5)

    def test_no_flapping_inside_band(self, result):
        res, _ = result
        rates = dict(res.error_rate_history)
        for t, mode in res.mode_history:
            if mode == "protective":
                assert rates[t] > 0.15
            else:
                assert rates[t] < 0.10

    def test_error_preference_drops(self, result):
        _, engine = result
        C = engine.model.C
        assert C.with_mode("protective").components[3][-1] < C.with_mode("normal").components[3][-1]

    def test_light_weight_drops_after_switch(self, result):
        res, _ = result
        switch = res.mode_history[0][0]
        before = [w[0] for t, w in res.weight_history if switch - 60.0 <= t < switch]
        after = [w[0] for t, w in res.weight_history if switch < t <= switch + 60.0]
        assert len(before) >= 50 and len(after) >= 50
        assert np.mean(after) < np.mean(before)


class TestDirectionalReproduction:

    def test_burst_default_short_runs(self, scenarios_dir):
        scenario = load_scenario(scenarios_dir / "burst_default.yaml")
        spec = ExperimentSpec(strategies=["aif", "baseline"], runs_per_strategy=3,
                              run_duration_s=180.0, seeds=[1, 2, 3], trace=False)
        results = {r.name: r for r in check_directional(run_experiment(spec, scenario))}
        assert results["heavy_share"].passed, results["heavy_share"].detail
        assert results["p50_gain"].passed, results["p50_gain"].detail
        assert "success_tradeoff" not in results


class TestReproducibility:

    def test_identical_seeds_identical_files(self, tmp_path, scenarios_dir):
        scenario = load_scenario(scenarios_dir / "burst_restarts.yaml")
        spec = ExperimentSpec(strategies=["aif", "baseline"], runs_per_strategy=1, run_duration_s=30.0)
        for name in ("a", "b"):
            emit_report(aggregate(run_experiment(spec, scenario, tmp_path / name)), tmp_path / name)
        for rel in ("results.csv", "runs.csv", "traces/aif_run0.jsonl", "raw/baseline_run0.jsonl"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestFastTickCost:

    def test_tick_well_inside_period(self):
        engine = PolicyEngine(EngineConfig(rng_seed=1))
        engine.fast_tick((0, 0, 0, 0), now=0.0)
        durations = []
        for i in range(20):
            started = time.perf_counter()
            engine.fast_tick((i % 3, 1, 0, 0), now=float(i + 1))
            durations.append(time.perf_counter() - started)
        assert np.median(durations) < 0.01
