import numpy as np
import pytest

from app.models.schemas import EngineConfig, Tier
from app.services.generative_model import (
    DEFAULT_POLICIES,
    N_STATES,
    STATE_GRID,
    GenerativeModel,
    ObservationModel,
    PreferenceModel,
    TransitionModel,
)
from app.services.policy_engine import (
    TRACE_FORMAT_VERSION,
    PolicyEngine,
    adjust_preferences,
    base_preferences,
    utilization_likelihood,
)
from app.utils.jsonl import read_jsonl

OBSERVATIONS = [(0, 1, 0, 0), (1, 2, 1, 0), (2, 2, 2, 1), (1, 1, 0, 0), (0, 0, 0, 0)]


def _run(engine, observations=OBSERVATIONS, start=1.0):
    return [engine.fast_tick(o, now=start + i).id for i, o in enumerate(observations)]


class TestAdjustPreferences:

    def test_enters_protective(self):
        C, mode = adjust_preferences(PreferenceModel(), 0.16)
        assert mode == "protective"
        assert C.components[3][-1] == pytest.approx(-11.5)

    def test_leaves_protective(self):
        C, mode = adjust_preferences(PreferenceModel(mode="protective"), 0.05)
        assert mode == "normal"
        assert C.components[3][-1] == pytest.approx(-3.0)

    @pytest.mark.parametrize("mode", ["normal", "protective"])
    def test_hysteresis_band_keeps_mode(self, mode):
        C = PreferenceModel(mode=mode)
        C2, mode2 = adjust_preferences(C, 0.12)
        assert mode2 == mode
        assert C2 is C

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            adjust_preferences(PreferenceModel(), 1.5)

    def test_base_preferences_follow_config(self):
        C = base_preferences(EngineConfig(error_high_normal=-2.0, error_high_protective=-9.0))
        assert C.error == (0.0, -2.0)
        assert C.with_mode("protective").components[3][-1] == pytest.approx(-9.0)


class TestUtilizationLikelihood:

    def test_no_readings(self):
        np.testing.assert_array_equal(utilization_likelihood(None), np.ones(N_STATES))

    def test_soft_evidence(self):
        like = utilization_likelihood({Tier.HEAVY: 2})
        hit = STATE_GRID[:, 2] == 2
        np.testing.assert_allclose(like[hit], 0.8)
        np.testing.assert_allclose(like[~hit], 0.1)

    def test_combined_tiers(self):
        like = utilization_likelihood({Tier.LIGHT: 0, Tier.MEDIUM: 1})
        both = (STATE_GRID[:, 4] == 0) & (STATE_GRID[:, 3] == 1)
        np.testing.assert_allclose(like[both], 0.64)
        assert like.min() == pytest.approx(0.01)


class TestFastTick:

    def test_first_tick_with_uninformative_model(self):
        engine = PolicyEngine(EngineConfig(deterministic=True))
        policy = engine.fast_tick((0, 0, 0, 0), now=1.0)
        assert policy.id == 0
        np.testing.assert_allclose(engine.state.belief, 1.0 / N_STATES)

    def test_belief_stays_normalized(self, engine_config):
        engine = PolicyEngine(engine_config)
        for pid in _run(engine):
            assert 0 <= pid < len(DEFAULT_POLICIES)
        np.testing.assert_allclose(engine.state.belief.sum(), 1.0)
        assert engine.state.tick_count == len(OBSERVATIONS)
        assert len(engine.buffer) == len(OBSERVATIONS)
        assert engine.weights == engine.current_policy.weights

    def test_same_seed_same_decisions(self):
        a = PolicyEngine(EngineConfig(rng_seed=7))
        b = PolicyEngine(EngineConfig(rng_seed=7))
        assert _run(a) == _run(b)

    def test_transition_records_previous_action(self, engine_config):
        engine = PolicyEngine(engine_config, start_time=0.0)
        chosen = engine.fast_tick((0, 0, 0, 0), now=1.0)
        engine.fast_tick((0, 0, 0, 0), now=2.0)
        first, second = engine.buffer.snapshot()
        assert first.action == 0
        assert first.dt_since_action_change == pytest.approx(1.0)
        assert second.action == chosen.id
        np.testing.assert_allclose(second.prior_belief, first.posterior_belief)

    def test_utilization_shifts_belief(self, engine_config):
        engine = PolicyEngine(engine_config)
        engine.fast_tick((0, 0, 0, 0), {Tier.HEAVY: 2}, now=1.0)
        heavy_saturated = engine.state.belief[STATE_GRID[:, 2] == 2].sum()
        assert heavy_saturated == pytest.approx(0.8)

    def test_protective_mode_switch(self, engine_config):
        engine = PolicyEngine(engine_config)
        engine.fast_tick((0, 0, 0, 1), now=1.0, error_rate=0.2)
        assert engine.state.mode == "protective"
        engine.fast_tick((0, 0, 0, 0), now=2.0, error_rate=0.12)
        assert engine.state.mode == "protective"
        engine.fast_tick((0, 0, 0, 0), now=3.0, error_rate=0.0)
        assert engine.state.mode == "normal"
        assert engine.state.mode_changes == [(1.0, "protective"), (3.0, "normal")]

    def test_degenerate_evidence_keeps_prediction(self, engine_config):
        counts = [np.ones((b, N_STATES)) for b in (3, 3, 3, 2)]
        # 兩個因子都近乎不可能，乘積下溢為 0
        counts[0][2] = 1e-200
        counts[1][2] = 1e-200
        model = GenerativeModel(A=ObservationModel(tuple(counts)), B=TransitionModel.initial())
        engine = PolicyEngine(engine_config, model)
        engine.fast_tick((2, 2, 0, 0), now=1.0)
        np.testing.assert_allclose(engine.state.belief, 1.0 / N_STATES)

    def test_action_probabilities(self, engine_config):
        engine = PolicyEngine(engine_config)
        assert engine.action_probabilities() is None
        engine.fast_tick((0, 0, 0, 0), now=1.0)
        probs = engine.action_probabilities()
        assert probs.shape == (len(DEFAULT_POLICIES),)
        np.testing.assert_allclose(probs.sum(), 1.0)


class TestDecisionTrace:

    def test_trace_records(self, tmp_path, engine_config):
        path = tmp_path / "trace.jsonl"
        engine = PolicyEngine(engine_config, trace_path=path)
        _run(engine)
        engine.fast_tick((0, 0, 0, 0), {Tier.LIGHT: 1}, now=10.0)
        engine.close()
        rows = list(read_jsonl(path))
        assert len(rows) == len(OBSERVATIONS) + 1
        row = rows[-1]
        assert row["v"] == TRACE_FORMAT_VERSION
        assert row["util"] == {"light": 1}
        assert len(row["G"]) == len(DEFAULT_POLICIES)
        assert len(row["argmax_state"]) == 5
        assert sum(row["weights"]) == pytest.approx(1.0)
        assert row["mode"] == "normal"

    def test_listener_failure_is_isolated(self, engine_config):
        engine = PolicyEngine(engine_config)
        seen = []

        def broken(record):
            raise RuntimeError("boom")

        engine.add_listener(broken)
        engine.add_listener(seen.append)
        engine.fast_tick((0, 0, 0, 0), now=1.0)
        assert len(seen) == 1
        assert seen[0]["policy"] == engine.current_policy.id


class TestSlowTick:

    def test_nothing_to_learn(self, engine_config):
        engine = PolicyEngine(engine_config)
        before = engine.model
        assert engine.slow_tick(0.0) is before
        assert engine.model_version == 0

    def test_publishes_new_snapshot(self, engine_config):
        engine = PolicyEngine(engine_config)
        before = engine.model
        _run(engine)
        after = engine.slow_tick(10.0)
        assert after is engine.model
        assert after is not before
        assert engine.model_version == 1
        added = after.A.counts[0].sum() - before.A.counts[0].sum()
        assert added == pytest.approx(engine_config.alpha * len(OBSERVATIONS))
        assert after.B.counts.sum() > before.B.counts.sum()

    def test_pending_pairs_consumed_once(self, engine_config):
        engine = PolicyEngine(engine_config)
        _run(engine)
        first = engine.slow_tick(10.0)
        second = engine.slow_tick(20.0)
        np.testing.assert_array_equal(first.A.counts[0], second.A.counts[0])

    def test_supplied_model_gets_configured_preferences(self):
        config = EngineConfig(error_high_normal=-2.0)
        engine = PolicyEngine(config, GenerativeModel.initial(preferences=PreferenceModel(mode="protective")))
        assert engine.model.C.error == (0.0, -2.0)
        assert engine.state.mode == "normal"
