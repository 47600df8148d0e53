"""
生成模型：狀態 / 動作 / 觀測空間、A/B/C 模型、貝氏信念更新與期望自由能評分

狀態 s = (latency_level, rate_level, util_heavy, util_medium, util_light) ∈ {0,1,2}^5，
以混合基數編碼成 [0, 243) 的索引，延遲等級為最高位。
觀測 o = (latency_bin, rate_bin, queue_bin, error_bin)，基數 (3, 3, 3, 2)。

所有矩陣以 pseudo-count 儲存，正規化視圖延遲計算並快取；模型物件視為不可變快照。
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr, rel_entr
from scipy.special import softmax as _scipy_softmax

from ..models.errors import (
    DegenerateEvidenceError,
    InvalidIndexError,
    InvalidObservationError,
    InvalidStateError,
)

logger = logging.getLogger(__name__)

STATE_RADIX: Tuple[int, ...] = (3, 3, 3, 3, 3)
STATE_DIMENSIONS: Tuple[str, ...] = (
    "latency_level", "rate_level", "util_heavy", "util_medium", "util_light",
)
N_STATES = 243
OBS_BINS: Tuple[int, ...] = (3, 3, 3, 2)
OBS_FACTORS: Tuple[str, ...] = ("latency", "rate", "queue", "error")
LN3 = math.log(3.0)


class StateTuple(NamedTuple):
    latency_level: int
    rate_level: int
    util_heavy: int
    util_medium: int
    util_light: int


class ObservationTuple(NamedTuple):
    latency_bin: int
    rate_bin: int
    queue_bin: int
    error_bin: int


def encode_state(s: Sequence[int]) -> int:
    """狀態元組 → 索引 (ℓ·81 + r·27 + uH·9 + uM·3 + uL)"""
    if len(s) != len(STATE_RADIX):
        raise InvalidStateError(f"狀態必須有 5 個欄位，收到 {tuple(s)}")
    index = 0
    for value, radix in zip(s, STATE_RADIX):
        if isinstance(value, bool) or int(value) != value or not 0 <= value < radix:
            raise InvalidStateError(f"狀態欄位超出範圍: {tuple(s)}")
        index = index * radix + int(value)
    return index


def decode_state(i: int) -> StateTuple:
    """索引 → 狀態元組"""
    if isinstance(i, bool) or int(i) != i or not 0 <= i < N_STATES:
        raise InvalidIndexError(f"狀態索引超出範圍: {i}")
    i = int(i)
    digits = []
    for radix in reversed(STATE_RADIX):
        digits.append(i % radix)
        i //= radix
    return StateTuple(*reversed(digits))


# (243, 5)：每個索引對應的狀態元組
STATE_GRID = np.array([decode_state(i) for i in range(N_STATES)], dtype=np.int64)
STATE_GRID.setflags(write=False)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True, order="C")
    a.setflags(write=False)
    return a


def softmax(x: np.ndarray) -> np.ndarray:
    """softmax；輸入全為 -inf 或含 NaN 時退回均勻分佈"""
    x = np.asarray(x, dtype=np.float64)
    p = _scipy_softmax(x)
    if not np.all(np.isfinite(p)):
        return np.full(x.shape, 1.0 / x.size)
    return p


def shannon_entropy(p: np.ndarray) -> float:
    """Shannon 熵 (nats)，0·ln0 = 0"""
    return float(entr(np.asarray(p, dtype=np.float64)).sum())


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """觀測模型 A：4 個因子矩陣，factor k 形狀為 (bins_k, n_states)"""
    counts: Tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = tuple(_frozen(c) for c in self.counts)
        for c in frozen:
            if c.ndim != 2 or c.shape[1] != frozen[0].shape[1]:
                raise ValueError("所有因子必須是 (bins_k, n_states) 且狀態數一致")
            if np.any(c <= 0):
                raise ValueError("pseudo-count 必須全部 > 0")
        object.__setattr__(self, "counts", frozen)

    @classmethod
    def uniform(cls, bins: Sequence[int] = OBS_BINS, n_states: int = N_STATES,
                pseudo_count: float = 1.0) -> "ObservationModel":
        return cls(tuple(np.full((b, n_states), pseudo_count) for b in bins))

    @property
    def bins(self) -> Tuple[int, ...]:
        return tuple(c.shape[0] for c in self.counts)

    @property
    def n_states(self) -> int:
        return self.counts[0].shape[1]

    @cached_property
    def normalized(self) -> Tuple[np.ndarray, ...]:
        return tuple(_frozen(c / c.sum(axis=0, keepdims=True)) for c in self.counts)

    @cached_property
    def state_entropy(self) -> np.ndarray:
        """每個狀態下各因子似然熵的總和 Σ_k H(factor_k[:, s])"""
        return _frozen(sum(entr(f).sum(axis=0) for f in self.normalized))


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """轉移模型 B：counts[a, s', s]，正規化後每欄和為 1"""
    counts: np.ndarray

    def __post_init__(self):
        c = _frozen(self.counts)
        if c.ndim != 3 or c.shape[1] != c.shape[2]:
            raise ValueError("B 形狀必須為 (n_actions, n_states, n_states)")
        if np.any(c <= 0):
            raise ValueError("pseudo-count 必須全部 > 0")
        object.__setattr__(self, "counts", c)

    @classmethod
    def initial(cls, n_actions: int = 20, n_states: int = N_STATES,
                base: float = 0.01, diagonal: float = 0.03) -> "TransitionModel":
        """全域 base pseudo-count，對角線再加 diagonal（弱維持現狀先驗）"""
        counts = np.full((n_actions, n_states, n_states), base)
        idx = np.arange(n_states)
        counts[:, idx, idx] += diagonal
        return cls(counts)

    @property
    def n_actions(self) -> int:
        return self.counts.shape[0]

    @property
    def n_states(self) -> int:
        return self.counts.shape[1]

    @cached_property
    def normalized(self) -> np.ndarray:
        return _frozen(self.counts / self.counts.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class PreferenceModel:
    """
    偏好 C（log 空間），每個觀測因子一個向量。

    保存 normal 模式的基準值；protective 模式下 C_ℓ 乘上 relax 係數，
    C_e(高錯誤 bin) 改為 error_high_protective。
    """
    latency: Tuple[float, ...] = (0.0, -1.5, -4.0)
    rate: Tuple[float, ...] = (0.0, -0.25, -0.5)
    queue: Tuple[float, ...] = (0.0, -1.0, -3.0)
    error: Tuple[float, ...] = (0.0, -3.0)
    mode: str = "normal"
    latency_relax_factor: float = 0.25
    error_high_protective: float = -11.5

    def __post_init__(self):
        if self.mode not in ("normal", "protective"):
            raise ValueError(f"未知的偏好模式: {self.mode}")
        for comp in (self.latency, self.rate, self.queue, self.error):
            if not all(math.isfinite(v) for v in comp):
                raise ValueError("偏好值必須是有限數")

    @property
    def components(self) -> Tuple[np.ndarray, ...]:
        latency = np.array(self.latency, dtype=np.float64)
        error = np.array(self.error, dtype=np.float64)
        if self.mode == "protective":
            latency = latency * self.latency_relax_factor
            error[-1] = self.error_high_protective
        return (latency, np.array(self.rate, dtype=np.float64),
                np.array(self.queue, dtype=np.float64), error)

    @property
    def distributions(self) -> Tuple[np.ndarray, ...]:
        """softmax 正規化後的偏好分佈"""
        return tuple(softmax(c) for c in self.components)

    def value(self, o: Sequence[int]) -> float:
        """C(o) = C_ℓ + C_r + C_q + C_e"""
        return float(sum(c[k] for c, k in zip(self.components, o)))

    def with_mode(self, mode: str) -> "PreferenceModel":
        return replace(self, mode=mode)


@dataclass(frozen=True)
class Policy:
    id: int
    weights: Tuple[float, float, float]  # (w_light, w_medium, w_heavy)
    label: str

    def __post_init__(self):
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"policy {self.id} 權重必須非負且總和為 1: {self.weights}")


_POLICY_ROWS = [
    ("balanced", (0.33, 0.33, 0.34)),
    ("heavy-biased", (0.15, 0.25, 0.60)),
    ("heavy-biased", (0.10, 0.20, 0.70)),
    ("heavy-biased", (0.05, 0.15, 0.80)),
    ("heavy-biased", (0.0, 0.10, 0.90)),
    ("heavy-biased", (0.0, 0.0, 1.0)),
    ("medium-biased", (0.20, 0.60, 0.20)),
    ("medium-biased", (0.15, 0.70, 0.15)),
    ("medium-biased", (0.10, 0.80, 0.10)),
    ("medium-biased", (0.0, 1.0, 0.0)),
    ("light-biased", (0.60, 0.20, 0.20)),
    ("light-biased", (0.70, 0.15, 0.15)),
    ("light-biased", (0.80, 0.10, 0.10)),
    ("light-biased", (1.0, 0.0, 0.0)),
    ("exploratory", (0.50, 0.30, 0.20)),
    ("exploratory", (0.20, 0.30, 0.50)),
    ("exploratory", (0.40, 0.40, 0.20)),
    ("exploratory", (0.20, 0.40, 0.40)),
    ("exploratory", (0.40, 0.20, 0.40)),
    ("exploratory", (0.25, 0.50, 0.25)),
]

DEFAULT_POLICIES: Tuple[Policy, ...] = tuple(
    Policy(id=i, weights=w, label=label) for i, (label, w) in enumerate(_POLICY_ROWS)
)
BALANCED_POLICY_ID = 0


@dataclass(frozen=True, eq=False)
class GenerativeModel:
    """(A, B, C) 與對應的策略表"""
    A: ObservationModel
    B: TransitionModel
    C: PreferenceModel = field(default_factory=PreferenceModel)
    policies: Tuple[Policy, ...] = DEFAULT_POLICIES

    def __post_init__(self):
        if self.A.n_states != self.B.n_states:
            raise ValueError("A 與 B 的狀態數不一致")
        if len(self.policies) != self.B.n_actions:
            raise ValueError("策略表長度必須等於 B 的動作數")

    @classmethod
    def initial(cls, base: float = 0.01, diagonal: float = 0.03,
                preferences: Optional[PreferenceModel] = None,
                policies: Tuple[Policy, ...] = DEFAULT_POLICIES) -> "GenerativeModel":
        return cls(
            A=ObservationModel.uniform(),
            B=TransitionModel.initial(len(policies), N_STATES, base, diagonal),
            C=preferences or PreferenceModel(),
            policies=policies,
        )


@dataclass(frozen=True)
class FreeEnergyBreakdown:
    risk: float
    ambiguity: float
    cost: float

    @property
    def total(self) -> float:
        return self.risk + self.ambiguity + self.cost


def uniform_belief(n_states: int = N_STATES) -> np.ndarray:
    return np.full(n_states, 1.0 / n_states)


def _policy_id(a: Union[Policy, int]) -> int:
    return a.id if isinstance(a, Policy) else int(a)


def likelihood(model: ObservationModel, o: Sequence[int]) -> np.ndarray:
    """p(o|s) = Π_k factor_k[o_k, s]"""
    if len(o) != len(model.bins) or any(not 0 <= int(v) < b for v, b in zip(o, model.bins)):
        raise InvalidObservationError(f"觀測 {tuple(o)} 超出 bin 基數 {model.bins}")
    out = np.ones(model.n_states)
    for factor, k in zip(model.normalized, o):
        out = out * factor[int(k)]
    return out


def belief_predict(b: np.ndarray, B: TransitionModel, a: Union[Policy, int]) -> np.ndarray:
    """p(s_t | o_{1:t-1}) = B_a · q(s_{t-1})"""
    out = B.normalized[_policy_id(a)] @ b
    return out / out.sum()


def belief_update(prior: np.ndarray, like: np.ndarray) -> np.ndarray:
    """q(s_t | o_{1:t}) ∝ p(o_t|s_t) · p(s_t|o_{1:t-1})"""
    post = np.asarray(prior, dtype=np.float64) * np.asarray(like, dtype=np.float64)
    total = post.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateEvidenceError("先驗 × 似然 的總質量為零")
    return post / total


def predict_observations(b_next: np.ndarray, A: ObservationModel) -> Tuple[np.ndarray, ...]:
    """各觀測因子的預測邊際 q(o_k) = Σ_s factor_k[:, s] · b_next[s]"""
    return tuple(f @ b_next for f in A.normalized)


def risk(pred: Sequence[np.ndarray], C: PreferenceModel) -> float:
    """Σ_k KL(pred_k ‖ softmax(C_k))"""
    total = sum(float(rel_entr(p, q).sum()) for p, q in zip(pred, C.distributions))
    return max(0.0, total)


def ambiguity(b_next: np.ndarray, A: ObservationModel) -> float:
    """Σ_s b_next[s] · Σ_k H(factor_k[:, s])"""
    return max(0.0, float(b_next @ A.state_entropy))


def action_cost(a: Policy, kappa: float = 0.1) -> float:
    """κ · (ln3 − H(weights))"""
    return max(0.0, kappa * (LN3 - shannon_entropy(np.array(a.weights))))


def expected_free_energy(b: np.ndarray, model: GenerativeModel, a: Union[Policy, int],
                         kappa: float = 0.1,
                         preferences: Optional[PreferenceModel] = None) -> FreeEnergyBreakdown:
    """單步期望自由能 G(a) = Risk + Ambiguity + Cost"""
    policy = model.policies[_policy_id(a)]
    b_next = belief_predict(b, model.B, policy)
    return FreeEnergyBreakdown(
        risk=risk(predict_observations(b_next, model.A), preferences or model.C),
        ambiguity=ambiguity(b_next, model.A),
        cost=action_cost(policy, kappa),
    )


def evaluate_policies(b: np.ndarray, model: GenerativeModel, kappa: float = 0.1,
                      preferences: Optional[PreferenceModel] = None) -> List[FreeEnergyBreakdown]:
    """一次評估整個策略表（向量化；結果與逐一呼叫 expected_free_energy 相同）"""
    b_next = np.einsum("aij,j->ai", model.B.normalized, b)
    b_next /= b_next.sum(axis=1, keepdims=True)
    prefs = (preferences or model.C).distributions
    risks = np.zeros(len(model.policies))
    for factor, q in zip(model.A.normalized, prefs):
        pred = b_next @ factor.T
        risks += rel_entr(pred, q[None, :]).sum(axis=1)
    ambiguities = b_next @ model.A.state_entropy
    return [
        FreeEnergyBreakdown(
            risk=max(0.0, float(r)),
            ambiguity=max(0.0, float(amb)),
            cost=action_cost(p, kappa),
        )
        for r, amb, p in zip(risks, ambiguities, model.policies)
    ]


def action_probabilities(G: Sequence[float], beta: float) -> np.ndarray:
    """p(a) ∝ exp(−β·G(a))"""
    return softmax(-beta * np.asarray(G, dtype=np.float64))


def select_action(G: Sequence[float], beta: float, rng: np.random.Generator,
                  deterministic: bool = False) -> int:
    """從 softmax 抽樣策略 id；deterministic 時取 argmin（同分取最小 id）"""
    G = np.asarray(G, dtype=np.float64)
    if deterministic:
        return int(np.argmin(G))
    p = action_probabilities(G, beta)
    return int(rng.choice(len(p), p=p))


def belief_entropy(b: np.ndarray) -> float:
    return shannon_entropy(b)


def belief_marginals(b: np.ndarray) -> dict:
    """5 個狀態維度各自的邊際分佈"""
    return {
        name: np.bincount(STATE_GRID[:, d], weights=b, minlength=3)
        for d, name in enumerate(STATE_DIMENSIONS)
    }
