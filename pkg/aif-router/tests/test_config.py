import pytest
from pydantic import ValidationError

from app.config import Settings
from app.models.errors import ConfigurationError
from app.models.schemas import ExperimentSpec, Tier, load_experiment, load_scenario, load_serve_config


class TestSettings:

    def test_defaults(self):
        s = Settings(_env_file=None)
        assert s.port == 8080
        assert s.tier_urls == {}
        assert s.engine_config().beta == 5.0

    def test_tier_urls_from_env(self, monkeypatch):
        monkeypatch.setenv("AIF_TIER_URLS", "light=http://a:8000, medium=http://b:8000,heavy=http://c:8000")
        monkeypatch.setenv("AIF_PORT", "9090")
        s = Settings(_env_file=None)
        assert s.tier_urls == {"light": "http://a:8000", "medium": "http://b:8000", "heavy": "http://c:8000"}
        cfg = s.serve_config()
        assert cfg.port == 9090
        assert {t.name for t in cfg.tiers} == set(Tier)

    def test_tier_urls_json(self, monkeypatch):
        monkeypatch.setenv("AIF_TIER_URLS", '{"heavy": "http://c:8000"}')
        assert Settings(_env_file=None).tier_urls == {"heavy": "http://c:8000"}

    def test_unknown_tier(self):
        with pytest.raises(ValidationError):
            Settings(_env_file=None, tier_urls="gpu=http://x")

    def test_engine_values(self, monkeypatch):
        monkeypatch.setenv("AIF_BETA", "2.5")
        monkeypatch.setenv("AIF_SEED", "17")
        cfg = Settings(_env_file=None).engine_config()
        assert cfg.beta == 2.5 and cfg.rng_seed == 17


class TestScenarioFiles:

    def test_bundled_scenarios(self, scenarios_dir):
        for name in ("burst_default.yaml", "burst_restarts.yaml", "light_fault.yaml"):
            scenario = load_scenario(scenarios_dir / name)
            assert {t.name for t in scenario.tiers} == set(Tier)
        spec, scenario_path = load_experiment(scenarios_dir / "experiment.yaml")
        assert scenario_path.exists()
        assert len(spec.seeds) >= spec.runs_per_strategy
        assert len(load_serve_config(scenarios_dir / "serve.yaml").tiers) == 3

    def test_missing_tier(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("tiers:\n  - {name: heavy, capacity_cores: 8, base_service_ms: 40}\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_scenario(path)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_scenario(path)

    def test_default_seeds(self):
        assert ExperimentSpec(runs_per_strategy=4).seeds == [1, 2, 3, 4]
