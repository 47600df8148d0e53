import numpy as np
import pytest

from app.models.errors import ConfigurationError
from app.models.schemas import DiscretizationConfig, EngineConfig, ScenarioSpec, Tier
from app.services.generative_model import (
    DEFAULT_POLICIES,
    STATE_GRID,
    ObservationModel,
    encode_state,
    evaluate_policies,
)
from app.services.model_priors import (
    capacity_transition_matrix,
    initial_model,
    rate_levels_rps,
    rate_transition,
    structured_observation_model,
)

# 與預設情境相同的 light / medium / heavy 吞吐上限
CAPACITY = {Tier.LIGHT: 12.0, Tier.MEDIUM: 27.0, Tier.HEAVY: 190.0}
BALANCED = (0.33, 0.33, 0.34)
HEAVY_ONLY = (0.0, 0.0, 1.0)


def _next_marginal(P, s, dim):
    """從狀態 s 出發，下一步第 dim 維的邊際分佈"""
    return np.bincount(STATE_GRID[:, dim], weights=P[:, s], minlength=3)


class TestStructuredObservationModel:

    def test_zero_strength_is_uniform(self):
        A = structured_observation_model(0.0)
        for a, u in zip(A.counts, ObservationModel.uniform().counts):
            np.testing.assert_array_equal(a, u)

    def test_matching_bins_dominate(self):
        A = structured_observation_model(10.0)
        s = encode_state((2, 1, 0, 0, 0))
        latency, rate, queue, error = (f[:, s] for f in A.normalized)
        assert latency[2] == pytest.approx(11.0 / 13.0)
        assert rate[1] == pytest.approx(11.0 / 13.0)
        assert queue[2] == pytest.approx(6.0 / 8.0)
        assert error[1] == pytest.approx(6.0 / 7.0)
        calm = encode_state((0, 1, 0, 0, 0))
        assert A.normalized[3][0, calm] == pytest.approx(6.0 / 7.0)

    def test_sharper_than_uniform(self):
        assert structured_observation_model(10.0).state_entropy.max() < ObservationModel.uniform().state_entropy.min()

    def test_negative_strength(self):
        with pytest.raises(ValueError):
            structured_observation_model(-1.0)


class TestCapacityTransition:

    def test_rate_levels(self):
        np.testing.assert_allclose(rate_levels_rps((20.0, 40.0)), [10.0, 30.0, 60.0])

    def test_rate_transition_rows(self):
        R = rate_transition(0.8)
        np.testing.assert_allclose(R.sum(axis=1), 1.0)
        assert R[0, 1] == pytest.approx(0.2)
        assert R[1, 0] == R[1, 2] == pytest.approx(0.1)

    @pytest.mark.parametrize("weights", [BALANCED, HEAVY_ONLY, (1.0, 0.0, 0.0), (0.2, 0.3, 0.5)])
    def test_column_stochastic(self, weights):
        P = capacity_transition_matrix(weights, CAPACITY)
        assert P.shape == (243, 243)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-12)

    def test_balanced_overloads_light_under_high_rate(self):
        s = encode_state((0, 2, 0, 0, 0))
        balanced = capacity_transition_matrix(BALANCED, CAPACITY)
        heavy = capacity_transition_matrix(HEAVY_ONLY, CAPACITY)
        # 60 rps × 0.33 超過 light 的 12 rps；heavy 獨撐只用到約三成
        assert _next_marginal(balanced, s, 4)[2] == pytest.approx(1.0)
        assert _next_marginal(balanced, s, 0)[2] == pytest.approx(1.0)
        assert _next_marginal(heavy, s, 2)[0] == pytest.approx(1.0)
        assert _next_marginal(heavy, s, 0)[0] == pytest.approx(1.0)

    def test_backlog_drains_slowly(self):
        s = encode_state((2, 0, 0, 0, 2))
        P = capacity_transition_matrix(HEAVY_ONLY, CAPACITY, backlog_persistence=0.9)
        light = _next_marginal(P, s, 4)
        assert light[2] == pytest.approx(0.9)
        assert light[0] == pytest.approx(0.1)
        # light 沒有流量，不影響延遲等級
        assert _next_marginal(P, s, 0)[0] == pytest.approx(1.0)

    def test_thresholds_follow_discretization(self):
        s = encode_state((0, 0, 0, 0, 0))
        wide = DiscretizationConfig(rate_thresholds_rps=(40.0, 80.0))
        # 下 bin 代表 20 rps，全部送 light 時超出 12 rps
        P = capacity_transition_matrix((1.0, 0.0, 0.0), CAPACITY, wide)
        assert _next_marginal(P, s, 4)[2] == pytest.approx(1.0)


class TestInitialModel:

    def test_uniform_default(self):
        model = initial_model(EngineConfig())
        assert model.B.counts[0, 0, 0] == pytest.approx(0.04)
        assert model.B.counts[0, 1, 0] == pytest.approx(0.01)

    def test_capacity_needs_throughput(self):
        with pytest.raises(ConfigurationError):
            initial_model(EngineConfig(b_prior="capacity"))

    def test_capacity_prior_prefers_heavy_under_load(self):
        scenario = ScenarioSpec()
        cfg = EngineConfig(a_prior_strength=10.0, b_prior="capacity", b_prior_diagonal=0.0,
                           tier_capacity_rps=scenario.capacity_rps())
        model = initial_model(cfg, scenario.discretization)
        belief = np.zeros(243)
        belief[encode_state((0, 2, 0, 0, 0))] = 1.0
        G = [g.total for g in evaluate_policies(belief, model)]
        best = DEFAULT_POLICIES[int(np.argmin(G))]
        assert best.weights[2] >= 0.8
        assert min(G) < G[0]

    def test_scenario_capacity(self):
        capacities = ScenarioSpec().capacity_rps()
        assert capacities[Tier.LIGHT] == pytest.approx(2000.0 / (160.0 * np.exp(0.045)))
        assert capacities[Tier.LIGHT] < capacities[Tier.MEDIUM] < capacities[Tier.HEAVY]

    def test_scenario_fills_capacity(self):
        scenario = ScenarioSpec(engine=EngineConfig(b_prior="capacity"))
        cfg = scenario.engine_config(rng_seed=9)
        assert cfg.rng_seed == 9
        assert cfg.tier_capacity_rps == scenario.capacity_rps()
        assert ScenarioSpec().engine_config().tier_capacity_rps is None
