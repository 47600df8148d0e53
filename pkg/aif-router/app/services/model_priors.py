"""
生成模型的初始先驗

A：觀測 bin 與對應的狀態維度一致時加上 strength（延遲 / 速率各自對應，
   佇列跟隨延遲等級，錯誤 bin 對應延遲等級是否為 2）。
B：依各層級吞吐上限推估每個動作下一步的使用率，延遲等級取有流量層級中最高者；
   超載中的層級以 backlog_persistence 的機率維持目前使用率（積壓尚未消化）。
"""

import logging
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from ..models.errors import ConfigurationError
from ..models.schemas import TIER_ORDER, DiscretizationConfig, EngineConfig, Tier
from .generative_model import (
    DEFAULT_POLICIES,
    N_STATES,
    OBS_BINS,
    STATE_DIMENSIONS,
    STATE_GRID,
    GenerativeModel,
    ObservationModel,
    Policy,
    PreferenceModel,
    TransitionModel,
)

logger = logging.getLogger(__name__)

LATENCY = STATE_DIMENSIONS.index("latency_level")
RATE = STATE_DIMENSIONS.index("rate_level")
UTIL_DIMS: Tuple[Tuple[Tier, int], ...] = (
    (Tier.HEAVY, STATE_DIMENSIONS.index("util_heavy")),
    (Tier.MEDIUM, STATE_DIMENSIONS.index("util_medium")),
    (Tier.LIGHT, STATE_DIMENSIONS.index("util_light")),
)


def structured_observation_model(strength: float, bins: Sequence[int] = OBS_BINS) -> ObservationModel:
    """strength = 0 時等同 ObservationModel.uniform()"""
    if strength < 0:
        raise ValueError(f"strength 必須 >= 0: {strength}")
    latency = STATE_GRID[:, LATENCY]
    rate = STATE_GRID[:, RATE]
    targets = (
        (latency, strength),
        (rate, strength),
        (latency, strength / 2.0),
        ((latency == 2).astype(np.int64), strength / 2.0),
    )
    counts = []
    for b, (target, s) in zip(bins, targets):
        hit = np.arange(b)[:, None] == np.minimum(target, b - 1)[None, :]
        counts.append(1.0 + s * hit)
    return ObservationModel(tuple(counts))


def rate_levels_rps(rate_thresholds: Tuple[float, float]) -> np.ndarray:
    """各速率等級的代表 RPS：下 bin 取門檻一半，中 bin 取中點，上 bin 取上門檻的 1.5 倍"""
    t0, t1 = rate_thresholds
    return np.array([t0 / 2.0, (t0 + t1) / 2.0, 1.5 * t1])


def rate_transition(persistence: float) -> np.ndarray:
    """R[r, r']：維持原等級的機率 persistence，其餘平分給相鄰等級"""
    R = np.zeros((3, 3))
    for r in range(3):
        neighbors = [n for n in (r - 1, r + 1) if 0 <= n < 3]
        R[r, r] = persistence
        for n in neighbors:
            R[r, n] = (1.0 - persistence) / len(neighbors)
    return R


def _latency_map(weights: Tuple[float, float, float]) -> np.ndarray:
    """L[ℓ', uH', uM', uL'] = 1 當 ℓ' 等於有流量層級的最高使用率"""
    active = {tier: w > 0 for tier, w in zip(TIER_ORDER, weights)}
    h, m, g = np.indices((3, 3, 3))
    level = np.zeros((3, 3, 3), dtype=np.int64)
    for grid, tier in ((h, Tier.HEAVY), (m, Tier.MEDIUM), (g, Tier.LIGHT)):
        if active[tier]:
            level = np.maximum(level, grid)
    return (np.arange(3)[:, None, None, None] == level[None]).astype(np.float64)


def _util_next(now: np.ndarray, target: np.ndarray, persistence: float) -> np.ndarray:
    """(n_states, 3)：超載（目前 > 目標）時以 persistence 維持目前等級，其餘移到目標等級"""
    out = np.zeros((len(now), 3))
    rows = np.arange(len(now))
    backlog = now > target
    np.add.at(out, (rows, target), np.where(backlog, 1.0 - persistence, 1.0))
    np.add.at(out, (rows, now), np.where(backlog, persistence, 0.0))
    return out


def capacity_transition_matrix(weights: Tuple[float, float, float],
                               capacity_rps: Mapping[Tier, float],
                               discretization: DiscretizationConfig = DiscretizationConfig(),
                               backlog_persistence: float = 0.93,
                               rate_persistence: float = 0.8) -> np.ndarray:
    """單一動作的 P(s'|s)，回傳 (n_states, n_states)，每欄和為 1"""
    share = dict(zip(TIER_ORDER, weights))
    demand = rate_levels_rps(discretization.rate_thresholds_rps)
    rate_now = STATE_GRID[:, RATE]

    factors = [rate_transition(rate_persistence)[rate_now]]
    for tier, dim in UTIL_DIMS:
        load = share[tier] * demand / capacity_rps[tier]
        target_by_rate = np.digitize(load, discretization.utilization_thresholds_fraction)
        factors.append(_util_next(STATE_GRID[:, dim], target_by_rate[rate_now], backlog_persistence))

    joint = np.einsum("sr,sh,sm,sg,lhmg->slrhmg", *factors, _latency_map(weights))
    return joint.reshape(N_STATES, N_STATES).T


def capacity_transition_model(policies: Sequence[Policy], capacity_rps: Mapping[Tier, float],
                              discretization: DiscretizationConfig = DiscretizationConfig(), *,
                              strength: float = 10.0, base: float = 0.01, diagonal: float = 0.0,
                              backlog_persistence: float = 0.93,
                              rate_persistence: float = 0.8) -> TransitionModel:
    counts = np.full((len(policies), N_STATES, N_STATES), base)
    idx = np.arange(N_STATES)
    counts[:, idx, idx] += diagonal
    for a, policy in enumerate(policies):
        counts[a] += strength * capacity_transition_matrix(
            policy.weights, capacity_rps, discretization, backlog_persistence, rate_persistence)
    return TransitionModel(counts)


def initial_model(config: EngineConfig, discretization: DiscretizationConfig = DiscretizationConfig(),
                  preferences: PreferenceModel = PreferenceModel(),
                  policies: Tuple[Policy, ...] = DEFAULT_POLICIES) -> GenerativeModel:
    """依 EngineConfig 的先驗設定組出冷啟動模型"""
    A = structured_observation_model(config.a_prior_strength)
    if config.b_prior == "capacity":
        if config.tier_capacity_rps is None:
            raise ConfigurationError("b_prior=capacity 需要 tier_capacity_rps")
        capacities: Dict[Tier, float] = {Tier(k): v for k, v in config.tier_capacity_rps.items()}
        B = capacity_transition_model(
            policies, capacities, discretization,
            strength=config.b_prior_strength,
            base=config.b_prior_base,
            diagonal=config.b_prior_diagonal,
            backlog_persistence=config.backlog_persistence,
            rate_persistence=config.rate_persistence,
        )
        logger.info("🧩 容量先驗: " + ", ".join(f"{t.value}={v:.1f}rps" for t, v in capacities.items()))
    else:
        B = TransitionModel.initial(len(policies), N_STATES, config.b_prior_base, config.b_prior_diagonal)
    return GenerativeModel(A=A, B=B, C=preferences, policies=policies)
