"""
策略引擎

快迴圈（每秒）：預測 → 觀測證據 → 信念更新 → 20 個策略的 G → softmax 抽樣 → 發布權重
慢迴圈（每 10 秒）：累積的 A 觀測對 + replay 抽樣更新 B → 原子替換模型快照

決策迴圈獨佔 EngineState；學習端只透過 replay buffer、待處理的 A 觀測對
以及不可變模型快照的替換與之溝通。
"""

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..models.errors import DegenerateEvidenceError
from ..models.schemas import DiscretizationConfig, EngineConfig, Tier
from ..utils.jsonl import JsonlWriter
from .generative_model import (
    BALANCED_POLICY_ID,
    STATE_DIMENSIONS,
    STATE_GRID,
    GenerativeModel,
    ObservationTuple,
    Policy,
    PreferenceModel,
    action_probabilities,
    belief_entropy,
    belief_predict,
    belief_update,
    decode_state,
    evaluate_policies,
    likelihood,
    select_action,
    uniform_belief,
)
from .learning import (
    ExperienceLog,
    ReplayBuffer,
    TransitionRecord,
    update_observation_model_batch,
    update_transition_model,
)
from .model_priors import initial_model

logger = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1

# 狀態元組中各層級使用率所在的維度
UTIL_DIMENSION: Dict[Tier, int] = {
    Tier.HEAVY: STATE_DIMENSIONS.index("util_heavy"),
    Tier.MEDIUM: STATE_DIMENSIONS.index("util_medium"),
    Tier.LIGHT: STATE_DIMENSIONS.index("util_light"),
}


def base_preferences(config: EngineConfig) -> PreferenceModel:
    return PreferenceModel(
        error=(0.0, config.error_high_normal),
        latency_relax_factor=config.latency_relax_factor,
        error_high_protective=config.error_high_protective,
    )


def adjust_preferences(C: PreferenceModel, recent_error_rate: float, mode: Optional[str] = None,
                       trigger: float = 0.15, release: float = 0.10) -> Tuple[PreferenceModel, str]:
    """
    遲滯切換偏好模式：
      normal 且 error_rate > trigger  → protective
      protective 且 error_rate < release → normal
    其餘情況維持目前模式。
    """
    if not 0.0 <= recent_error_rate <= 1.0:
        raise ValueError(f"error_rate 必須在 [0, 1]: {recent_error_rate}")
    mode = mode or C.mode
    if mode == "normal" and recent_error_rate > trigger:
        mode = "protective"
    elif mode == "protective" and recent_error_rate < release:
        mode = "normal"
    if mode != C.mode:
        C = C.with_mode(mode)
    return C, mode


def utilization_likelihood(readings: Optional[Dict[Tier, int]], weight_hit: float = 0.8,
                           weight_miss: float = 0.1, n_states: int = 243) -> np.ndarray:
    """使用率軟證據：每個層級維度上，觀測到的 bin 權重 0.8，其他 bin 0.1"""
    out = np.ones(n_states)
    if not readings:
        return out
    for tier, level in readings.items():
        dim = UTIL_DIMENSION[Tier(tier)]
        out = out * np.where(STATE_GRID[:, dim] == int(level), weight_hit, weight_miss)
    return out


@dataclass
class EngineState:
    belief: np.ndarray
    preferences: PreferenceModel
    current_policy: int = BALANCED_POLICY_ID
    last_policy_change: float = 0.0
    tick_count: int = 0
    last_error_rate: float = 0.0
    mode_changes: List[Tuple[float, str]] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return self.preferences.mode


class PolicyEngine:
    """主動推論路由引擎"""

    def __init__(self, config: EngineConfig = EngineConfig(), model: Optional[GenerativeModel] = None,
                 *, discretization: Optional[DiscretizationConfig] = None,
                 trace_path=None, experience_log_path=None, start_time: float = 0.0):
        self.config = config
        action_seed, replay_seed = np.random.SeedSequence(config.rng_seed).spawn(2)
        self.rng = np.random.default_rng(action_seed)
        self.replay_rng = np.random.default_rng(replay_seed)

        prefs = base_preferences(config)
        if model is None:
            model = initial_model(config, discretization or DiscretizationConfig(), prefs)
        else:
            model = replace(model, C=prefs)
        self._model = model
        self._model_lock = threading.Lock()
        self.model_version = 0

        self.buffer = ReplayBuffer(config.replay_capacity)
        self._pending_a: List[Tuple[ObservationTuple, np.ndarray]] = []
        self._pending_lock = threading.Lock()

        self.state = EngineState(
            belief=uniform_belief(model.A.n_states),
            preferences=prefs,
            last_policy_change=start_time,
        )
        self.last_G: Optional[np.ndarray] = None
        self.trace = JsonlWriter(trace_path)
        self.experience = ExperienceLog(experience_log_path)
        self._listeners: List[Callable[[dict], None]] = []

    # ---- 快照 -------------------------------------------------------------

    @property
    def model(self) -> GenerativeModel:
        with self._model_lock:
            return self._model

    def _publish(self, model: GenerativeModel):
        with self._model_lock:
            self._model = model
            self.model_version += 1

    @property
    def policies(self) -> Sequence[Policy]:
        return self.model.policies

    @property
    def current_policy(self) -> Policy:
        return self.model.policies[self.state.current_policy]

    @property
    def weights(self) -> Tuple[float, float, float]:
        return self.current_policy.weights

    def add_listener(self, fn: Callable[[dict], None]):
        self._listeners.append(fn)

    # ---- 快迴圈 -----------------------------------------------------------

    def fast_tick(self, observation: Sequence[int], util_readings: Optional[Dict[Tier, int]] = None,
                  *, now: float, error_rate: Optional[float] = None) -> Policy:
        """單次推論與動作選擇，回傳本秒的策略"""
        cfg = self.config
        st = self.state
        observation = ObservationTuple(*(int(v) for v in observation))

        if error_rate is not None:
            st.last_error_rate = error_rate
            prefs, mode = adjust_preferences(st.preferences, error_rate,
                                             trigger=cfg.error_trigger, release=cfg.error_release)
            if mode != st.mode:
                logger.info(f"🛡️ 偏好模式切換 {st.mode} → {mode} (error_rate={error_rate:.3f}, t={now:.1f})")
                st.mode_changes.append((now, mode))
                st.preferences = prefs

        model = self.model
        prior = belief_predict(st.belief, model.B, st.current_policy)
        evidence = likelihood(model.A, observation)
        if util_readings:
            evidence = evidence * utilization_likelihood(
                util_readings, cfg.util_hit_weight, cfg.util_miss_weight, model.A.n_states)
        try:
            posterior = belief_update(prior, evidence)
        except DegenerateEvidenceError:
            logger.warning(f"⚠️ 觀測 {tuple(observation)} 的證據退化，沿用預測信念")
            posterior = prior

        G = np.array([g.total for g in evaluate_policies(posterior, model, cfg.kappa, st.preferences)])
        chosen = select_action(G, cfg.beta, self.rng, cfg.deterministic)

        record = TransitionRecord(
            prior_belief=st.belief,
            posterior_belief=posterior,
            action=st.current_policy,
            observation=observation,
            dt_since_action_change=max(0.0, now - st.last_policy_change),
            timestamp=now,
        )
        self.buffer.append(record)
        self.experience.write(record)
        with self._pending_lock:
            self._pending_a.append((observation, posterior))

        if chosen != st.current_policy:
            st.current_policy = chosen
            st.last_policy_change = now
        st.belief = posterior
        st.tick_count += 1
        self.last_G = G

        policy = model.policies[chosen]
        if self.trace.enabled or self._listeners:
            self._emit(self._decision_record(now, observation, posterior, G, policy, util_readings))
        return policy

    def _decision_record(self, now, observation, posterior, G, policy, util_readings) -> dict:
        return {
            "v": TRACE_FORMAT_VERSION,
            "t": round(now, 6),
            "obs": list(observation),
            "util": {Tier(t).value: int(v) for t, v in util_readings.items()} if util_readings else None,
            "entropy": round(belief_entropy(posterior), 9),
            "argmax_state": list(decode_state(int(np.argmax(posterior)))),
            "G": [round(float(g), 9) for g in G],
            "policy": policy.id,
            "weights": list(policy.weights),
            "mode": self.state.mode,
            "error_rate": round(self.state.last_error_rate, 6),
        }

    def _emit(self, record: dict):
        self.trace.write(record)
        for fn in self._listeners:
            try:
                fn(record)
            except Exception as e:
                logger.error(f"❌ 決策紀錄監聽器失敗: {e}")

    def action_probabilities(self) -> Optional[np.ndarray]:
        if self.last_G is None:
            return None
        return action_probabilities(self.last_G, self.config.beta)

    # ---- 慢迴圈 -----------------------------------------------------------

    def slow_tick(self, now: Optional[float] = None) -> GenerativeModel:
        """批次學習並發布新的模型快照"""
        with self._pending_lock:
            pairs, self._pending_a = self._pending_a, []
        batch = self.buffer.sample(self.config.replay_batch_size, self.replay_rng)

        model = self.model
        A = update_observation_model_batch(model.A, pairs, self.config.alpha)
        B = update_transition_model(model.B, batch, self.config.alpha_b)
        if A is model.A and B is model.B:
            return model

        new_model = GenerativeModel(A=A, B=B, C=model.C, policies=model.policies)
        self._publish(new_model)
        logger.debug(f"🔄 模型快照 v{self.model_version} (A 觀測 {len(pairs)} 筆, B 樣本 {len(batch)} 筆, t={now})")
        return new_model

    def close(self):
        self.trace.close()
        self.experience.close()
