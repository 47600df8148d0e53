import json
from typing import Annotated, Dict, Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, NoDecode, SettingsConfigDict

from .models.schemas import DiscretizationConfig, EngineConfig, ServeConfig, ServeTier, Tier


class Settings(BaseSettings):
    # 單一真實來源：專案根目錄的 .env（../.env），環境變數一律以 AIF_ 為前綴
    model_config = SettingsConfigDict(
        env_prefix="AIF_",
        env_file=("../.env",),
        extra="ignore",
    )
    """應用設定（CLI 旗標的預設值皆取自此處）"""

    # 代理服務
    host: str = "0.0.0.0"
    port: int = 8080
    log_level: str = "INFO"

    # 層級端點
    tier_urls: Annotated[Dict[str, str], NoDecode] = {}
    tier_timeout_ms: float = 10000.0
    metrics_url: Optional[str] = None
    util_poll_period_s: float = 10.0
    window_s: float = 10.0

    # 引擎參數
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
    a_prior_strength: float = 0.0
    seed: int = 0
    deterministic: bool = False

    # 離散化門檻
    latency_thresholds_ms: tuple[float, float] = (500.0, 2000.0)
    rate_thresholds_rps: tuple[float, float] = (20.0, 40.0)
    queue_thresholds: tuple[float, float] = (10.0, 50.0)
    error_threshold: float = 0.10
    utilization_thresholds_fraction: tuple[float, float] = (0.4, 0.8)

    # 實驗 / 輸出
    experiment: str = "scenarios/experiment.yaml"
    out_dir: str = "results"
    trace_path: Optional[str] = None
    experience_log_path: Optional[str] = None
    model_path: Optional[str] = None

    # 允許以 "light=url,medium=url,heavy=url" 指定層級端點（環境變數）
    @field_validator('tier_urls', mode='before')
    @classmethod
    def _parse_tier_urls(cls, v):
        if isinstance(v, str):
            s = v.strip()
            if not s:
                return {}
            if s.startswith('{'):
                v = json.loads(s)
            else:
                pairs = [p.split('=', 1) for p in s.split(',') if p.strip()]
                v = {k.strip(): url.strip() for k, url in pairs}
        if isinstance(v, dict):
            unknown = set(v) - {t.value for t in Tier}
            if unknown:
                raise ValueError(f"未知的層級: {sorted(unknown)}")
        return v

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            beta=self.beta,
            alpha=self.alpha,
            alpha_b=self.alpha_b,
            kappa=self.kappa,
            fast_period_s=self.fast_period_s,
            slow_period_s=self.slow_period_s,
            error_trigger=self.error_trigger,
            error_release=self.error_release,
            error_high_protective=self.error_high_protective,
            error_high_normal=self.error_high_normal,
            latency_relax_factor=self.latency_relax_factor,
            a_prior_strength=self.a_prior_strength,
            deterministic=self.deterministic,
            rng_seed=self.seed,
        )

    def discretization_config(self) -> DiscretizationConfig:
        return DiscretizationConfig(
            latency_thresholds_ms=self.latency_thresholds_ms,
            rate_thresholds_rps=self.rate_thresholds_rps,
            queue_thresholds=self.queue_thresholds,
            error_threshold=self.error_threshold,
            utilization_thresholds_fraction=self.utilization_thresholds_fraction,
        )

    def serve_config(self) -> ServeConfig:
        """無設定檔時由環境變數組出 serve 設定"""
        return ServeConfig(
            host=self.host,
            port=self.port,
            tiers=[ServeTier(name=Tier(name), url=url, timeout_ms=self.tier_timeout_ms)
                   for name, url in self.tier_urls.items()],
            metrics_url=self.metrics_url,
            util_poll_period_s=self.util_poll_period_s,
            window_s=self.window_s,
            engine=self.engine_config(),
            discretization=self.discretization_config(),
            trace_path=self.trace_path,
            experience_log_path=self.experience_log_path,
            model_in=self.model_path,
        )


settings = Settings()
