"""
線上學習：A 的 pseudo-count 累積、B 的 sigmoid 加權 replay 更新

B 更新規則：每筆轉移對其動作矩陣加上 α_B · w(Δt) · outer(q_t, q_{t-1})，
信念為 delta 分佈時即退化成一般的轉移計數。
"""

import logging
import threading
from collections import deque
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.special import expit

from ..utils.jsonl import JsonlWriter
from .generative_model import (
    ObservationModel,
    ObservationTuple,
    TransitionModel,
    decode_state,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TransitionRecord:
    prior_belief: np.ndarray      # q(s_{t-1})
    posterior_belief: np.ndarray  # q(s_t)
    action: int
    observation: ObservationTuple
    dt_since_action_change: float
    timestamp: float = 0.0

    def __post_init__(self):
        if self.dt_since_action_change < 0:
            raise ValueError(f"dt 必須 >= 0: {self.dt_since_action_change}")


class ReplayBuffer:
    """容量固定的 FIFO，最舊的先淘汰"""

    def __init__(self, capacity: int = 5000):
        self.capacity = capacity
        self._records: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def append(self, rec: TransitionRecord):
        with self._lock:
            self._records.append(rec)

    def snapshot(self) -> List[TransitionRecord]:
        with self._lock:
            return list(self._records)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[TransitionRecord]:
        """批次內不重複的均勻抽樣，大小 min(batch_size, len)"""
        records = self.snapshot()
        n = min(batch_size, len(records))
        if n == 0:
            return []
        idx = rng.choice(len(records), size=n, replace=False)
        return [records[i] for i in idx]


def record_transition(buffer: ReplayBuffer, rec: TransitionRecord):
    buffer.append(rec)


def sigmoid_weight(dt: float) -> float:
    """w(Δt) = 1 / (1 + e^{−(Δt − 2)/2})"""
    if dt < 0:
        raise ValueError(f"dt 必須 >= 0: {dt}")
    return float(expit((dt - 2.0) / 2.0))


def update_observation_model(A: ObservationModel, o: Sequence[int], belief: np.ndarray,
                             alpha: float) -> ObservationModel:
    """A_k[o_k, :] += α · q(s)"""
    return update_observation_model_batch(A, [(o, belief)], alpha)


def update_observation_model_batch(A: ObservationModel, pairs, alpha: float) -> ObservationModel:
    """對多個 (observation, posterior) 依序套用 A 更新，只建立一次新快照"""
    if not pairs or alpha == 0:
        return A
    counts = [c.copy() for c in A.counts]
    for o, belief in pairs:
        for k, c in enumerate(counts):
            c[int(o[k])] += alpha * belief
    return ObservationModel(tuple(counts))


def update_transition_model(B: TransitionModel, batch: Sequence[TransitionRecord],
                            alpha_b: float) -> TransitionModel:
    """B_a[s', s] += α_B · w(Δt) · q_t[s'] · q_{t-1}[s]"""
    if not batch:
        return B
    counts = B.counts.copy()
    for rec in batch:
        w = alpha_b * sigmoid_weight(rec.dt_since_action_change)
        counts[rec.action] += w * np.outer(rec.posterior_belief, rec.prior_belief)
    return TransitionModel(counts)


class ExperienceLog:
    """選用的經驗紀錄（以 argmax 狀態摘要代替完整信念）"""

    def __init__(self, path=None):
        self._writer = JsonlWriter(path)

    @property
    def enabled(self) -> bool:
        return self._writer.enabled

    def write(self, rec: TransitionRecord):
        if not self._writer.enabled:
            return
        n = len(rec.posterior_belief)
        prior_state = int(np.argmax(rec.prior_belief))
        post_state = int(np.argmax(rec.posterior_belief))
        self._writer.write({
            "t": rec.timestamp,
            "action": rec.action,
            "dt": rec.dt_since_action_change,
            "weight": sigmoid_weight(rec.dt_since_action_change),
            "observation": list(rec.observation),
            "prior_state": list(decode_state(prior_state)) if n == 243 else prior_state,
            "posterior_state": list(decode_state(post_state)) if n == 243 else post_state,
        })

    def close(self):
        self._writer.close()
