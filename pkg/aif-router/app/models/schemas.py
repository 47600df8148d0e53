import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class Tier(str, Enum):
    """服務層級"""
    LIGHT = "light"
    MEDIUM = "medium"
    HEAVY = "heavy"


# 權重向量的固定順序 (w_light, w_medium, w_heavy)
TIER_ORDER: Tuple[Tier, ...] = (Tier.LIGHT, Tier.MEDIUM, Tier.HEAVY)


class RequestStatus(str, Enum):
    SUCCESS = "success"
    ERROR = "error"
    TIMEOUT = "timeout"


class DiscretizationConfig(BaseModel):
    """觀測離散化門檻（值等於門檻時歸入上一個 bin）"""
    latency_thresholds_ms: Tuple[float, float] = (500.0, 2000.0)
    rate_thresholds_rps: Tuple[float, float] = (20.0, 40.0)
    queue_thresholds: Tuple[float, float] = (10.0, 50.0)
    error_threshold: float = 0.10
    utilization_thresholds_fraction: Tuple[float, float] = (0.4, 0.8)

    @field_validator(
        "latency_thresholds_ms",
        "rate_thresholds_rps",
        "queue_thresholds",
        "utilization_thresholds_fraction",
    )
    @classmethod
    def _strictly_increasing(cls, v):
        if not v[0] < v[1]:
            raise ValueError(f"門檻必須嚴格遞增: {v}")
        return v


class EngineConfig(BaseModel):
    """決策引擎參數"""
    beta: float = 5.0
    alpha: float = 0.05
    alpha_b: float = 0.05
    kappa: float = 0.1
    fast_period_s: float = 1.0
    slow_period_s: float = 10.0
    error_trigger: float = 0.15
    error_release: float = 0.10
    error_high_protective: float = -11.5
    error_high_normal: float = -3.0
    latency_relax_factor: float = 0.25
    util_hit_weight: float = 0.8
    util_miss_weight: float = 0.1
    replay_capacity: int = 5000
    replay_batch_size: int = 100
    # B 的均勻先驗：全域 base，對角線再加 diagonal
    b_prior_base: float = 0.01
    b_prior_diagonal: float = 0.03
    # A 的結構先驗：0 = 均勻；> 0 時觀測 bin 與對應狀態維度一致者加上此強度
    a_prior_strength: float = Field(default=0.0, ge=0)
    # B 的容量先驗：依各層級處理能力推估下一步使用率與延遲
    b_prior: Literal["uniform", "capacity"] = "uniform"
    b_prior_strength: float = Field(default=10.0, ge=0)
    backlog_persistence: float = Field(default=0.93, ge=0, lt=1)
    rate_persistence: float = Field(default=0.8, gt=0, le=1)
    tier_capacity_rps: Optional[Dict[Tier, float]] = None
    deterministic: bool = False
    rng_seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.beta < 0:
            raise ValueError("beta 必須 >= 0")
        if self.alpha <= 0 or self.alpha_b <= 0:
            raise ValueError("alpha / alpha_b 必須 > 0")
        if not (0.0 <= self.error_release < self.error_trigger <= 1.0):
            raise ValueError("需滿足 0 <= error_release < error_trigger <= 1")
        if self.b_prior_base <= 0 or self.b_prior_diagonal < 0:
            raise ValueError("b_prior_base 必須 > 0，b_prior_diagonal 必須 >= 0")
        if self.tier_capacity_rps is not None:
            if set(self.tier_capacity_rps) != set(Tier):
                raise ValueError("tier_capacity_rps 必須包含 light/medium/heavy")
            if any(v <= 0 for v in self.tier_capacity_rps.values()):
                raise ValueError("tier_capacity_rps 必須全部 > 0")
        return self


class RestartSpec(BaseModel):
    """Pod 重啟過程：指數分佈上線時間 + 固定停機時間"""
    mean_up_s: float = Field(gt=0)
    down_duration_s: float = Field(gt=0)


class FaultWindow(BaseModel):
    """強制錯誤區間"""
    start_s: float = Field(ge=0)
    end_s: float
    error_probability: float = Field(ge=0, le=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.end_s <= self.start_s:
            raise ValueError("end_s 必須大於 start_s")
        return self


class TierSpec(BaseModel):
    """模擬層級模型"""
    name: Tier
    capacity_cores: float = Field(gt=0)
    base_service_ms: float = Field(gt=0)
    service_jitter: float = Field(default=0.3, ge=0)
    concurrency_limit: Optional[int] = Field(default=None, ge=1)
    queue_capacity: int = Field(default=200, ge=0)
    restart: Optional[RestartSpec] = None
    fault_windows: List[FaultWindow] = []

    @property
    def slots(self) -> int:
        return self.concurrency_limit or max(1, int(round(self.capacity_cores)))

    def capacity_rps(self, reference_cores: float) -> float:
        """穩態吞吐上限：slots / 平均服務時間（lognormal 抖動的期望值為 e^{σ²/2}）"""
        mean_ms = (self.base_service_ms * reference_cores / self.capacity_cores
                   * math.exp(self.service_jitter ** 2 / 2.0))
        return self.slots * 1000.0 / mean_ms


class WorkloadSpec(BaseModel):
    pattern: Literal["burst", "steady"] = "burst"
    target_rps: float = Field(default=50.0, gt=0)
    run_duration_s: float = Field(default=600.0, gt=0)
    burst_on_s: float = Field(default=20.0, gt=0)
    burst_off_s: float = Field(default=10.0, ge=0)
    seed: int = 0


def _default_tiers() -> List[TierSpec]:
    return [
        TierSpec(name=Tier.LIGHT, capacity_cores=2, base_service_ms=40.0,
                 restart=RestartSpec(mean_up_s=300.0, down_duration_s=30.0)),
        TierSpec(name=Tier.MEDIUM, capacity_cores=3, base_service_ms=40.0,
                 restart=RestartSpec(mean_up_s=600.0, down_duration_s=30.0)),
        TierSpec(name=Tier.HEAVY, capacity_cores=8, base_service_ms=40.0),
    ]


class ScenarioSpec(BaseModel):
    """模擬情境檔（YAML）"""
    name: str = "default"
    tiers: List[TierSpec] = Field(default_factory=_default_tiers)
    workload: WorkloadSpec = WorkloadSpec()
    reference_cores: float = Field(default=8.0, gt=0)
    timeout_ms: float = Field(default=10000.0, gt=0)
    util_poll_period_s: float = Field(default=10.0, gt=0)
    seed: int = 0
    engine: EngineConfig = EngineConfig()
    discretization: DiscretizationConfig = DiscretizationConfig()

    @model_validator(mode="after")
    def _one_per_tier(self):
        names = sorted(t.name.value for t in self.tiers)
        if names != sorted(t.value for t in Tier):
            raise ValueError(f"情境必須恰好包含 light/medium/heavy 三個層級，收到 {names}")
        return self

    def capacity_rps(self) -> Dict[Tier, float]:
        return {t.name: t.capacity_rps(self.reference_cores) for t in self.tiers}

    def engine_config(self, **update) -> EngineConfig:
        """情境的引擎參數；容量先驗未給 tier_capacity_rps 時以情境層級推算"""
        if self.engine.b_prior == "capacity" and self.engine.tier_capacity_rps is None:
            update.setdefault("tier_capacity_rps", self.capacity_rps())
        return self.engine.model_copy(update=update)


Strategy = Literal["aif", "baseline", "capacity"]


class ExperimentSpec(BaseModel):
    """實驗協定：策略 × 重複次數"""
    strategies: List[Strategy] = ["aif", "baseline"]
    runs_per_strategy: int = Field(default=3, ge=1)
    run_duration_s: float = Field(default=600.0, gt=0)
    cooldown_s: float = 900.0
    scenario: str = "burst_default.yaml"
    seeds: Optional[List[int]] = None
    parallel: bool = False
    trace: bool = True
    model_in: Optional[str] = None
    model_out: Optional[str] = None

    @model_validator(mode="after")
    def _seed_count(self):
        if self.seeds is None:
            self.seeds = list(range(1, self.runs_per_strategy + 1))
        if len(self.seeds) < self.runs_per_strategy:
            raise ValueError("seeds 數量少於 runs_per_strategy")
        return self


class ServeTier(BaseModel):
    name: Tier
    url: str
    timeout_ms: float = Field(default=10000.0, gt=0)
    # 容量先驗用的吞吐上限估計
    capacity_rps: Optional[float] = Field(default=None, gt=0)


class ServeConfig(BaseModel):
    """即時 HTTP 代理模式設定（與情境檔共用 engine / discretization 區段）"""
    host: str = "0.0.0.0"
    port: int = 8080
    tiers: List[ServeTier] = []
    metrics_url: Optional[str] = None
    util_poll_period_s: float = 10.0
    window_s: float = 10.0
    engine: EngineConfig = EngineConfig()
    discretization: DiscretizationConfig = DiscretizationConfig()
    trace_path: Optional[str] = None
    experience_log_path: Optional[str] = None
    model_in: Optional[str] = None

    def engine_config(self) -> EngineConfig:
        """每個層級都標了 capacity_rps 且 engine 未指定時，以此補上容量先驗所需的吞吐"""
        capacities = {t.name: t.capacity_rps for t in self.tiers if t.capacity_rps is not None}
        if self.engine.tier_capacity_rps is None and set(capacities) == set(Tier):
            return self.engine.model_copy(update={"tier_capacity_rps": capacities})
        return self.engine


class RunReport(BaseModel):
    """單次執行結果"""
    strategy: str
    run_index: int
    seed: int
    request_count: int
    success_rate_pct: float
    p50_ms: float
    p95_ms: float
    # 成功請求中各層級佔比
    tier_share_pct: Dict[str, float]
    # 全部請求中各層級（成功）佔比；加上 failed_pct 合計 100%
    tier_of_total_pct: Dict[str, float]
    failed_pct: float
    # 執行期間注入的 Pod 重啟次數
    restarts: int = 0


class HealthCheck(BaseModel):
    """健康檢查模型"""
    status: str = "healthy"
    timestamp: float
    connections: dict
    version: str = "1.0.0"


def _read_yaml(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"無法讀取設定檔 {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"設定檔頂層必須是 mapping: {path}")
    return data


def load_scenario(path) -> ScenarioSpec:
    """載入情境 YAML"""
    path = Path(path)
    try:
        return ScenarioSpec(**_read_yaml(path))
    except ValidationError as e:
        raise ConfigurationError(f"情境檔格式錯誤 {path}: {e}") from e


def load_experiment(path) -> Tuple[ExperimentSpec, Path]:
    """載入實驗 YAML；回傳 (spec, 情境檔絕對路徑)，情境路徑相對於實驗檔解析"""
    path = Path(path)
    try:
        spec = ExperimentSpec(**_read_yaml(path))
    except ValidationError as e:
        raise ConfigurationError(f"實驗檔格式錯誤 {path}: {e}") from e
    scenario_path = Path(spec.scenario)
    if not scenario_path.is_absolute():
        scenario_path = (path.parent / scenario_path).resolve()
    return spec, scenario_path


def load_serve_config(path) -> ServeConfig:
    path = Path(path)
    try:
        return ServeConfig(**_read_yaml(path))
    except ValidationError as e:
        raise ConfigurationError(f"serve 設定檔格式錯誤 {path}: {e}") from e
