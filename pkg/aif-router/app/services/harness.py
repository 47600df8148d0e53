"""
實驗協定：策略 × 重複次數的模擬執行、統計彙整與報告輸出

輸出目錄結構：
  results.csv        每個策略一列 + delta 列（欄位對應比較表）
  runs.csv           每次執行一列
  summary.txt        人類可讀摘要（含 Welch t 檢定）
  raw/<strategy>_run<k>.jsonl     原始請求結果（第一行為 header）
  traces/aif_run<k>.jsonl         決策紀錄（僅 aif）
"""

import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from ..models.errors import ConfigurationError, ReportError
from ..models.schemas import (
    TIER_ORDER,
    ExperimentSpec,
    RequestStatus,
    RunReport,
    ScenarioSpec,
    load_experiment,
    load_scenario,
)
from ..utils.jsonl import JsonlWriter, read_jsonl
from ..utils.percentiles import nearest_rank
from .dispatcher import WeightBoard
from .model_store import load_model, save_model
from .observation import RequestOutcome
from .policy_engine import PolicyEngine, base_preferences
from .simulator import EdgeSimulator, SimulationResult

logger = logging.getLogger(__name__)

STRATEGY_WEIGHTS: Dict[str, Tuple[float, float, float]] = {
    "aif": (0.33, 0.33, 0.34),       # 引擎接手前的初始權重
    "baseline": (0.33, 0.33, 0.34),
    "capacity": (0.15, 0.23, 0.62),  # 依 2:3:8 核心比例
}

CSV_COLUMNS = [
    "strategy", "succ_pct", "succ_std", "p50_ms", "p50_std", "p95_ms", "p95_std",
    "heavy_pct", "medium_pct", "light_pct", "failed_pct", "requests",
]
FLOAT_FORMAT = "%.4f"


def build_report(outcomes: Sequence[RequestOutcome], strategy: str, run_index: int, seed: int,
                 restarts: int = 0) -> RunReport:
    """由原始請求結果計算單次執行的指標"""
    n = len(outcomes)
    successes = [o for o in outcomes if o.status == RequestStatus.SUCCESS]
    latencies = [o.latency_ms for o in successes]
    n_ok = len(successes)
    per_tier = {t.value: 0 for t in TIER_ORDER}
    for o in successes:
        per_tier[o.tier.value] += 1
    return RunReport(
        strategy=strategy,
        run_index=run_index,
        seed=seed,
        request_count=n,
        success_rate_pct=100.0 * n_ok / n if n else 0.0,
        p50_ms=nearest_rank(latencies, 50),
        p95_ms=nearest_rank(latencies, 95),
        tier_share_pct={t: (100.0 * c / n_ok if n_ok else 0.0) for t, c in per_tier.items()},
        tier_of_total_pct={t: (100.0 * c / n if n else 0.0) for t, c in per_tier.items()},
        failed_pct=100.0 * (n - n_ok) / n if n else 0.0,
        restarts=restarts,
    )


def derive_seeds(scenario_seed: int, run_seed: int) -> Tuple[int, int]:
    """(模擬器 seed, 引擎 seed)；同一 seed 下各策略看到相同的工作負載"""
    sim_seed, engine_seed = np.random.SeedSequence([scenario_seed, run_seed]).generate_state(2)
    return int(sim_seed), int(engine_seed)


def _fresh_file(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    return path


def _model_path(template: str, strategy: str, run_index: int) -> Path:
    p = Path(template)
    return p.with_name(f"{p.stem}_{strategy}_run{run_index}{p.suffix or '.npz'}")


def run_single(scenario: ScenarioSpec, strategy: str, run_index: int, seed: int, *,
               duration_s: Optional[float] = None, out_dir: Optional[Path] = None,
               trace: bool = True, model_in: Optional[str] = None,
               model_out: Optional[str] = None) -> RunReport:
    """一次完整的模擬執行；每次都建立全新的引擎"""
    if strategy not in STRATEGY_WEIGHTS:
        raise ConfigurationError(f"未知的策略: {strategy}")
    duration = duration_s or scenario.workload.run_duration_s
    sim_seed, engine_seed = derive_seeds(scenario.seed, seed)
    out_dir = Path(out_dir) if out_dir else None

    engine = None
    if strategy == "aif":
        cfg = scenario.engine_config(rng_seed=engine_seed)
        model = load_model(model_in, preferences=base_preferences(cfg)) if model_in else None
        trace_path = _fresh_file(out_dir / "traces" / f"aif_run{run_index}.jsonl") if (out_dir and trace) else None
        engine = PolicyEngine(cfg, model, discretization=scenario.discretization, trace_path=trace_path)

    board = WeightBoard(STRATEGY_WEIGHTS[strategy])
    sim = EdgeSimulator(scenario, board, engine, seed=sim_seed, duration_s=duration)
    logger.info(f"🚀 開始執行 {strategy} run {run_index} (seed={seed}, {duration:.0f}s)")
    try:
        result: SimulationResult = sim.run()
    finally:
        if engine is not None:
            engine.close()

    if engine is not None and model_out:
        save_model(engine.model, _model_path(model_out, strategy, run_index))

    report = build_report(result.outcomes, strategy, run_index, seed, restarts=sum(result.restarts.values()))
    if out_dir:
        write_outcome_log(out_dir / "raw" / f"{strategy}_run{run_index}.jsonl", report, result, scenario.name)
    logger.info(f"✅ {strategy} run {run_index}: 成功率 {report.success_rate_pct:.2f}%, "
                f"P50 {report.p50_ms:.0f}ms, 請求 {report.request_count}")
    return report


def write_outcome_log(path: Path, report: RunReport, result: SimulationResult, scenario_name: str):
    with JsonlWriter(_fresh_file(path)) as w:
        w.write({
            "kind": "header",
            "strategy": report.strategy,
            "run_index": report.run_index,
            "seed": report.seed,
            "scenario": scenario_name,
            "duration_s": result.duration_s,
            "downtime_s": result.downtime_s,
            "restarts": result.restarts,
        })
        for o in result.outcomes:
            w.write(o.to_record())


def _run_job(args) -> RunReport:
    scenario, strategy, run_index, seed, kwargs = args
    return run_single(scenario, strategy, run_index, seed, **kwargs)


def run_experiment(spec: ExperimentSpec, scenario: ScenarioSpec, out_dir: Optional[Path] = None) -> List[RunReport]:
    """依序（或在 parallel 時以多行程）執行所有策略 × run"""
    if not spec.strategies:
        raise ConfigurationError("strategies 不可為空")
    if spec.cooldown_s:
        logger.info(f"模擬模式忽略 cooldown ({spec.cooldown_s:.0f}s)")
    kwargs = dict(duration_s=spec.run_duration_s, out_dir=out_dir, trace=spec.trace,
                  model_in=spec.model_in, model_out=spec.model_out)
    jobs = [
        (scenario, strategy, k, spec.seeds[k], kwargs)
        for strategy in spec.strategies
        for k in range(spec.runs_per_strategy)
    ]
    if spec.parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(job) for job in jobs]


def run_experiment_file(path, out_dir: Optional[Path] = None, **overrides) -> List[RunReport]:
    """載入實驗檔與情境檔（任何設定錯誤都在第一次執行前拋出）再執行"""
    spec, scenario_path = load_experiment(path)
    updates = {k: v for k, v in overrides.items() if v is not None}
    if updates:
        base = spec.model_dump()
        if "runs_per_strategy" in updates and "seeds" not in updates:
            base["seeds"] = None
        try:
            spec = ExperimentSpec(**{**base, **updates})
        except ValueError as e:
            raise ConfigurationError(f"實驗參數覆寫無效: {e}") from e
    scenario = load_scenario(scenario_path)
    return run_experiment(spec, scenario, out_dir)


# ---- 彙整 -----------------------------------------------------------------

def welch_t(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Welch t 統計量與 p 值；樣本不足時回傳 (nan, nan)"""
    if len(a) < 2 or len(b) < 2:
        return float("nan"), float("nan")
    res = stats.ttest_ind(np.asarray(a, float), np.asarray(b, float), equal_var=False)
    return float(res.statistic), float(res.pvalue)


def runs_frame(reports: Iterable[RunReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        rows.append({
            "strategy": r.strategy,
            "run_index": r.run_index,
            "seed": r.seed,
            "succ_pct": r.success_rate_pct,
            "p50_ms": r.p50_ms,
            "p95_ms": r.p95_ms,
            "heavy_pct": r.tier_share_pct["heavy"],
            "medium_pct": r.tier_share_pct["medium"],
            "light_pct": r.tier_share_pct["light"],
            "failed_pct": r.failed_pct,
            "requests": r.request_count,
        })
    return pd.DataFrame(rows)


@dataclass
class Aggregate:
    table: pd.DataFrame                 # CSV_COLUMNS，含 delta 列
    runs: pd.DataFrame
    single_run: List[str] = field(default_factory=list)   # n=1 的策略
    welch: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)

    def row(self, strategy: str) -> pd.Series:
        return self.table.set_index("strategy").loc[strategy]


def _sample_std(values: pd.Series) -> float:
    return float(values.std(ddof=1)) if len(values) > 1 else 0.0


def _delta_row(label: str, aif: dict, base: dict) -> dict:
    def pct(key):
        return f"{100.0 * (aif[key] - base[key]) / base[key]:+.2f}%" if base[key] else ""

    def pp(key):
        return f"{aif[key] - base[key]:+.2f}pp"

    return {
        "strategy": label,
        "succ_pct": pp("succ_pct"), "succ_std": "",
        "p50_ms": pct("p50_ms"), "p50_std": "",
        "p95_ms": pct("p95_ms"), "p95_std": "",
        "heavy_pct": pp("heavy_pct"), "medium_pct": pp("medium_pct"), "light_pct": pp("light_pct"),
        "failed_pct": pp("failed_pct"), "requests": "",
    }


def aggregate(reports: Sequence[RunReport]) -> Aggregate:
    """每個策略的平均 ± 樣本標準差（n−1）；aif 對每個比較策略各有一列 delta"""
    runs = runs_frame(reports)
    if runs.empty:
        return Aggregate(pd.DataFrame(columns=CSV_COLUMNS), runs)

    rows, by_strategy, single = [], {}, []
    for strategy in dict.fromkeys(runs["strategy"]):
        g = runs[runs["strategy"] == strategy]
        if len(g) == 1:
            single.append(strategy)
        row = {
            "strategy": strategy,
            "succ_pct": float(g["succ_pct"].mean()), "succ_std": _sample_std(g["succ_pct"]),
            "p50_ms": float(g["p50_ms"].mean()), "p50_std": _sample_std(g["p50_ms"]),
            "p95_ms": float(g["p95_ms"].mean()), "p95_std": _sample_std(g["p95_ms"]),
            "heavy_pct": float(g["heavy_pct"].mean()),
            "medium_pct": float(g["medium_pct"].mean()),
            "light_pct": float(g["light_pct"].mean()),
            "failed_pct": float(g["failed_pct"].mean()),
            "requests": int(g["requests"].sum()),
        }
        rows.append(row)
        by_strategy[strategy] = row

    welch = {}
    if "aif" in by_strategy:
        aif_runs = runs[runs["strategy"] == "aif"]
        for other in ("baseline", "capacity"):
            if other not in by_strategy:
                continue
            label = "delta" if other == "baseline" else f"delta_{other}"
            rows.append(_delta_row(label, by_strategy["aif"], by_strategy[other]))
            other_runs = runs[runs["strategy"] == other]
            welch[other] = {
                "p50_ms": welch_t(aif_runs["p50_ms"].tolist(), other_runs["p50_ms"].tolist()),
                "succ_pct": welch_t(aif_runs["succ_pct"].tolist(), other_runs["succ_pct"].tolist()),
            }

    table = pd.DataFrame(rows, columns=CSV_COLUMNS)
    return Aggregate(table=table, runs=runs, single_run=single, welch=welch)


# ---- 輸出 -----------------------------------------------------------------

def _csv_text(frame: pd.DataFrame) -> str:
    """浮點數一律以固定格式輸出，混合型別的 delta 列也不例外"""
    def fmt(v):
        if isinstance(v, float):
            return FLOAT_FORMAT % v
        return v
    return frame.map(fmt).to_csv(index=False, lineterminator="\n")


def _atomic_write_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_summary(agg: Aggregate) -> str:
    lines = ["AIF-Router 實驗摘要", ""]
    cols = ["succ_pct", "succ_std", "p50_ms", "p50_std", "p95_ms", "p95_std",
            "heavy_pct", "medium_pct", "light_pct", "failed_pct", "requests"]
    for _, r in agg.table.iterrows():
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{c}={v:.2f}" if isinstance(v, float) else f"{c}={v}")
        lines.append(f"{r['strategy']:<16} " + " ".join(cells))
    if agg.single_run:
        lines.append("")
        lines.append(f"n=1（標準差以 0 表示）: {', '.join(agg.single_run)}")
    for other, tests in agg.welch.items():
        lines.append("")
        lines.append(f"Welch t 檢定 (aif vs {other}):")
        for metric, (t, p) in tests.items():
            if math.isnan(t):
                lines.append(f"  {metric}: 樣本不足")
            else:
                lines.append(f"  {metric}: t={t:.4f}, p={p:.6g}")
    return "\n".join(lines) + "\n"


def emit_report(agg: Aggregate, out_dir) -> Dict[str, Path]:
    """寫出 results.csv / runs.csv / summary.txt；先寫暫存檔再 rename，失敗時不留半成品"""
    if agg.table.empty:
        raise ReportError("沒有任何策略結果，不輸出報告")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": out_dir / "results.csv",
            "runs": out_dir / "runs.csv",
            "summary": out_dir / "summary.txt",
        }
        _atomic_write_text(paths["results"], _csv_text(agg.table))
        _atomic_write_text(paths["runs"], _csv_text(agg.runs))
        _atomic_write_text(paths["summary"], render_summary(agg))
    except OSError as e:
        raise ReportError(f"無法寫入報告 {out_dir}: {e}") from e
    logger.info(f"📊 報告已輸出: {paths['results']}")
    return paths


# ---- 重算 / 檢查 ------------------------------------------------------------

def load_outcome_log(path) -> Tuple[dict, List[RequestOutcome]]:
    records = iter(read_jsonl(path))
    header = next(records, None)
    if not header or header.get("kind") != "header":
        raise ReportError(f"原始紀錄缺少 header: {path}")
    return header, [RequestOutcome.from_record(r) for r in records]


def replay(log_dir) -> List[RunReport]:
    """由 raw/*.jsonl 重新計算每次執行的報告"""
    log_dir = Path(log_dir)
    raw_dir = log_dir / "raw" if (log_dir / "raw").is_dir() else log_dir
    files = sorted(raw_dir.glob("*.jsonl"))
    if not files:
        raise ReportError(f"找不到原始紀錄: {raw_dir}")
    reports = []
    for f in files:
        header, outcomes = load_outcome_log(f)
        restarts = sum((header.get("restarts") or {}).values())
        reports.append(build_report(outcomes, header["strategy"], header["run_index"], header["seed"], restarts))
    order = {s: i for i, s in enumerate(STRATEGY_WEIGHTS)}
    reports.sort(key=lambda r: (order.get(r.strategy, len(order)), r.run_index))
    logger.info(f"🔄 已由 {len(files)} 個原始紀錄重算報告")
    return reports


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_directional(reports: Sequence[RunReport], reference: str = "baseline",
                      min_p50_gain: float = 0.10, max_succ_std_pp: float = 2.0,
                      max_p50_cv: float = 0.15) -> List[CheckResult]:
    """方向性比較：heavy 佔比、P50 改善、跨 seed 變異；有重啟時另比較成功率取捨"""
    aif = {r.seed: r for r in reports if r.strategy == "aif"}
    ref = {r.seed: r for r in reports if r.strategy == reference}
    if not aif or not ref:
        raise ReportError(f"需要 aif 與 {reference} 兩種策略的結果")
    seeds = sorted(set(aif) & set(ref))
    results = []

    wins = sum(aif[s].tier_share_pct["heavy"] > ref[s].tier_share_pct["heavy"] for s in seeds)
    need = math.ceil(2 * len(seeds) / 3)
    results.append(CheckResult("heavy_share", wins >= need, f"{wins}/{len(seeds)} 個 seed aif heavy 佔比較高"))

    aif_p50 = float(np.mean([r.p50_ms for r in aif.values()]))
    ref_p50 = float(np.mean([r.p50_ms for r in ref.values()]))
    gain = (ref_p50 - aif_p50) / ref_p50 if ref_p50 else 0.0
    results.append(CheckResult("p50_gain", gain >= min_p50_gain,
                               f"aif {aif_p50:.0f}ms vs {reference} {ref_p50:.0f}ms ({-gain:+.1%})"))

    # 成功率取捨只在有 Pod 重啟的執行中才有意義
    if any(r.restarts > 0 for r in (*aif.values(), *ref.values())):
        aif_succ = float(np.mean([r.success_rate_pct for r in aif.values()]))
        ref_succ = float(np.mean([r.success_rate_pct for r in ref.values()]))
        results.append(CheckResult("success_tradeoff", aif_succ <= ref_succ,
                                   f"aif {aif_succ:.2f}% vs {reference} {ref_succ:.2f}%"))

    for name, group in (("aif", aif), (reference, ref)):
        succ = [r.success_rate_pct for r in group.values()]
        p50 = [r.p50_ms for r in group.values()]
        succ_std = float(np.std(succ, ddof=1)) if len(succ) > 1 else 0.0
        p50_std = float(np.std(p50, ddof=1)) if len(p50) > 1 else 0.0
        p50_mean = float(np.mean(p50))
        ok = succ_std < max_succ_std_pp and (p50_std < max_p50_cv * p50_mean if p50_mean else True)
        results.append(CheckResult(f"variance_{name}", ok,
                                   f"succ std {succ_std:.2f}pp, P50 std {p50_std:.0f}ms / mean {p50_mean:.0f}ms"))
    return results
