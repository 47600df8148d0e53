#!/usr/bin/env python3
"""
AIF-Router 命令行工具
  run     執行實驗（模擬）並輸出報告
  replay  由原始請求紀錄重新計算報告
  serve   啟動即時 HTTP 代理
  check   檢查實驗結果的方向性指標
"""

import sys
import argparse
import logging
from pathlib import Path
from dotenv import load_dotenv

# 添加項目根目錄到 Python 路徑
project_root = Path(__file__).parent.parent
# 載入 .env（若存在）
load_dotenv(dotenv_path=project_root / ".env", override=False)
# aif-router 目錄名含連字號，無法作為頂層模組名
sys.path.insert(0, str(project_root / "aif-router"))

from rich.console import Console
from rich.table import Table

from app.config import settings
from app.models.errors import AIFRouterError
from app.models.schemas import ServeTier, Tier, load_serve_config
from app.services.harness import (
    aggregate,
    check_directional,
    emit_report,
    replay,
    run_experiment_file,
)

console = Console()


def setup_logging(level: str = "INFO"):
    """設置日誌"""
    numeric_level = getattr(logging, level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f'Invalid log level: {level}')

    logging.basicConfig(
        level=numeric_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def _csv_list(value, cast=str):
    if value is None:
        return None
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


def print_results_table(agg):
    table = Table(title="AIF-Router 實驗結果")
    for col in agg.table.columns:
        table.add_column(col, justify="left" if col == "strategy" else "right")
    for _, row in agg.table.iterrows():
        cells = []
        for v in row:
            cells.append(f"{v:.2f}" if isinstance(v, float) else str(v))
        table.add_row(*cells)
    console.print(table)
    if agg.single_run:
        console.print(f"⚠️  n=1（標準差以 0 表示）: {', '.join(agg.single_run)}")
    for other, tests in agg.welch.items():
        t, p = tests["p50_ms"]
        console.print(f"Welch t (P50, aif vs {other}): t={t:.4f}, p={p:.6g}")


def cmd_run(args) -> int:
    reports = run_experiment_file(
        args.experiment,
        Path(args.out),
        run_duration_s=args.duration,
        runs_per_strategy=args.runs,
        seeds=_csv_list(args.seeds, int),
        strategies=_csv_list(args.strategy),
        parallel=True if args.parallel else None,
        trace=False if args.no_trace else None,
        model_in=args.model_in,
        model_out=args.model_out,
    )
    agg = aggregate(reports)
    paths = emit_report(agg, args.out)
    print_results_table(agg)
    console.print(f"✅ 報告: {paths['results']}")
    return 0


def cmd_replay(args) -> int:
    reports = replay(args.log_dir)
    agg = aggregate(reports)
    paths = emit_report(agg, args.out or args.log_dir)
    print_results_table(agg)
    console.print(f"✅ 報告: {paths['results']}")
    return 0


def cmd_check(args) -> int:
    reports = replay(args.log_dir)
    results = check_directional(reports, reference=args.reference)
    table = Table(title=f"方向性檢查（aif vs {args.reference}）")
    table.add_column("criterion")
    table.add_column("result", justify="center")
    table.add_column("detail")
    for r in results:
        table.add_row(r.name, "[green]PASS[/green]" if r.passed else "[red]FAIL[/red]", r.detail)
    console.print(table)
    return 0 if all(r.passed for r in results) else 1


def cmd_serve(args) -> int:
    import uvicorn
    from app.main import create_app

    cfg = load_serve_config(args.config) if args.config else settings.serve_config()
    updates = {}
    if args.host:
        updates["host"] = args.host
    if args.port:
        updates["port"] = args.port
    if args.metrics_url:
        updates["metrics_url"] = args.metrics_url
    if args.tier:
        tiers = {t.name: t for t in cfg.tiers}
        for spec in args.tier:
            name, _, url = spec.partition("=")
            tier = Tier(name.strip())
            tiers[tier] = ServeTier(name=tier, url=url.strip(), timeout_ms=settings.tier_timeout_ms)
        updates["tiers"] = list(tiers.values())
    if updates:
        cfg = cfg.model_copy(update=updates)

    app = create_app(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level=args.log_level.lower())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="AIF-Router 實驗與代理工具",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用範例:
  %(prog)s run                                     # 使用預設實驗檔
  %(prog)s run -e scenarios/experiment_restarts.yaml -o out_restarts   # 含重啟注入
  %(prog)s run --duration 2700 --seeds 1,2,3       # 完整長度執行
  %(prog)s replay results                          # 由原始紀錄重算報告
  %(prog)s check results                           # 方向性檢查
  %(prog)s serve --tier light=http://10.0.0.2:8000 --tier medium=... --tier heavy=...

所有預設值皆可由 AIF_<FIELD> 環境變數覆寫（例如 AIF_OUT_DIR、AIF_TIER_URLS）。
        """
    )
    parser.add_argument("--log-level", default=settings.log_level, help=f"日誌等級 (預設: {settings.log_level})")
    parser.add_argument("--verbose", "-v", action="store_true", help="顯示詳細日誌")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="執行實驗")
    p_run.add_argument("-e", "--experiment", default=settings.experiment,
                       help=f"實驗檔 (預設: {settings.experiment})")
    p_run.add_argument("-o", "--out", default=settings.out_dir, help=f"輸出目錄 (預設: {settings.out_dir})")
    p_run.add_argument("--duration", type=float, help="每次執行的秒數")
    p_run.add_argument("--runs", type=int, help="每個策略的重複次數")
    p_run.add_argument("--seeds", help="以逗號分隔的 seed 清單")
    p_run.add_argument("--strategy", help="以逗號分隔的策略（aif,baseline,capacity）")
    p_run.add_argument("--parallel", action="store_true", help="多行程平行執行")
    p_run.add_argument("--no-trace", action="store_true", help="不輸出決策紀錄")
    p_run.add_argument("--model-in", default=settings.model_path, help="以既有模型暖啟動")
    p_run.add_argument("--model-out", help="執行結束後儲存模型")
    p_run.set_defaults(func=cmd_run)

    p_replay = sub.add_parser("replay", help="由原始紀錄重算報告")
    p_replay.add_argument("log_dir", nargs="?", default=settings.out_dir)
    p_replay.add_argument("-o", "--out", help="輸出目錄（預設與 log_dir 相同）")
    p_replay.set_defaults(func=cmd_replay)

    p_check = sub.add_parser("check", help="方向性檢查")
    p_check.add_argument("log_dir", nargs="?", default=settings.out_dir)
    p_check.add_argument("--reference", default="baseline", choices=["baseline", "capacity"])
    p_check.set_defaults(func=cmd_check)

    p_serve = sub.add_parser("serve", help="啟動 HTTP 代理")
    p_serve.add_argument("-c", "--config", help="serve 設定檔（YAML）")
    p_serve.add_argument("--host", help=f"監聽位址 (預設: {settings.host})")
    p_serve.add_argument("--port", type=int, help=f"監聽埠 (預設: {settings.port})")
    p_serve.add_argument("--tier", action="append", help="層級端點 name=url，可重複")
    p_serve.add_argument("--metrics-url", help="使用率 metrics 端點")
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main():
    """主函數"""
    parser = build_parser()
    args = parser.parse_args()
    setup_logging("DEBUG" if args.verbose else args.log_level)

    try:
        sys.exit(args.func(args))

    except KeyboardInterrupt:
        console.print("\n⚠️  操作被用戶中斷")
        sys.exit(130)

    except AIFRouterError as e:
        console.print(f"❌ {e}", markup=False)
        sys.exit(1)

    except Exception as e:
        console.print(f"❌ 執行過程中發生未預期的錯誤: {e}", markup=False)
        if args.verbose:
            import traceback
            traceback.print_exc()
        sys.exit(1)


if __name__ == "__main__":
    main()
