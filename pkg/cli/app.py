#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GREAT 命令行入口 - run / attack / report / selftest

退出码：0 成功，1 配置或输入文件错误，2 数值中止或自检失败
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

# 添加项目根目录到Python路径
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from great.core.attacks import robustness_sweep
from great.core.config_manager import ConfigError, ConfigManager, load_run_config
from great.core.data import IdxFormatError, load_dataset
from great.core.defense import StepAborted
from great.core.metrics_manager import ReportError, build_report
from great.core.models import ATTACK_MODES, AttackSpec, DatasetConfig
from great.core.net import load_checkpoint
from great.core.pipeline_runner import run_pipeline
from great.core.selftest import SUITES, run_selftest
from great.core.tape import NonFiniteError

logger = logging.getLogger("great.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def setup_logging(verbose: bool = False):
    """按 config.yaml 的 app.log_level 配置根日志器，只配置一次"""
    level = "DEBUG" if verbose else str(ConfigManager.get_app_config().get("log_level", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def emit(payload: Dict[str, Any]):
    """结果以 JSON 打印到标准输出"""
    print(json.dumps(payload, ensure_ascii=False, indent=2, default=str))


def _progress(current: int, total: int, message: str):
    logger.debug(f"进度 {current}/{total}: {message}")


# ---------------------------------------------------------------- 子命令

def cmd_run(args) -> int:
    """运行一个或多个实验配置；--jobs > 1 时在独立进程中并行执行"""
    try:
        configs = [load_run_config(path) for path in args.config]
        outputs = [os.path.abspath(c.output_dir) for c in configs]
        if len(set(outputs)) != len(outputs):
            raise ConfigError(f"多个运行的 output_dir 重复: {outputs}")
    except ConfigError as e:
        logger.error(f"❌ 配置错误: {e}")
        emit({"success": False, "error": str(e)})
        return EXIT_CONFIG

    results: List[Dict[str, Any]] = []
    try:
        if args.jobs > 1 and len(configs) > 1:
            logger.info(f"🚀 并行运行 {len(configs)} 个配置 (jobs={args.jobs})")
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for result in pool.map(run_pipeline, configs):
                    results.append(result.to_dict())
        else:
            for config in configs:
                results.append(run_pipeline(config, _progress).to_dict())
    except (StepAborted, NonFiniteError) as e:
        logger.error(f"❌ 训练中止: {e}")
        emit({"success": False, "error": str(e), "report": getattr(e, "report", {})})
        return EXIT_NUMERICAL
    except (IdxFormatError, OSError) as e:
        logger.error(f"❌ 数据读取失败: {e}")
        emit({"success": False, "error": str(e)})
        return EXIT_CONFIG
    except ValueError as e:
        # 配置能解析但与数据或模型不相容，例如形状不匹配
        logger.error(f"❌ 运行配置无效: {e}")
        emit({"success": False, "error": str(e)})
        return EXIT_CONFIG

    emit({"success": True, "runs": results})
    return EXIT_OK


def _parse_epsilons(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"无法解析 ε 列表: {text}") from e
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"ε 列表必须非空且非负: {text}")
    return values


def cmd_attack(args) -> int:
    """对检查点模型在其数据集的测试划分上做 ε 扫描"""
    try:
        epsilons = _parse_epsilons(args.epsilons)
        spec = AttackSpec(epsilon=max(epsilons), k=args.k, mode=args.mode)
        if not os.path.exists(args.checkpoint):
            raise ConfigError(f"检查点不存在: {args.checkpoint}")
        model, header = load_checkpoint(args.checkpoint)
        if "dataset" not in header:
            raise ConfigError(f"检查点 {args.checkpoint} 未记录数据集，无法重建评估集")
        dataset = load_dataset(DatasetConfig(**header["dataset"]))
    except (ConfigError, IdxFormatError, ValueError, OSError) as e:
        logger.error(f"❌ {e}")
        emit({"success": False, "error": str(e)})
        return EXIT_CONFIG

    method = args.method or os.path.splitext(os.path.basename(args.checkpoint))[0]
    try:
        frame = robustness_sweep(model, dataset.x_test[:args.n_eval], dataset.y_test[:args.n_eval],
                                 epsilons, [spec], method=method, seed=header.get("seed", 0))
    except (StepAborted, NonFiniteError) as e:
        logger.error(f"❌ 攻击评估中止: {e}")
        emit({"success": False, "error": str(e)})
        return EXIT_NUMERICAL
    if args.output:
        frame.to_csv(args.output, index=False)
        logger.info(f"💾 扫描结果已写入 {args.output}")
    emit({"success": True, "sweep": frame.to_dict(orient="records")})
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        frame = build_report(args.dir)
    except ReportError as e:
        logger.error(f"❌ 报告生成失败: {e}")
        emit({"success": False, "error": str(e), "file": e.path})
        return EXIT_CONFIG
    emit({"success": True, "methods": sorted(frame["method"].unique().tolist()), "rows": len(frame)})
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(args.suite)
    failed = [r for r in results if not r.passed]
    emit({"success": not failed, "checks": [r.to_dict() for r in results]})
    if failed:
        logger.error(f"❌ {len(failed)} 项自检未通过")
        return EXIT_NUMERICAL
    logger.info(f"✅ 全部 {len(results)} 项自检通过")
    return EXIT_OK


# ---------------------------------------------------------------- 解析

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="great", description="梯度对抗训练 (GREAT) 实验工具")
    parser.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="按配置运行实验流水线")
    run.add_argument("--config", action="append", required=True, help="运行配置 JSON，可重复给出")
    run.add_argument("--jobs", type=int, default=1, help="并行进程数")
    run.set_defaults(handler=cmd_run)

    attack = sub.add_parser("attack", help="对检查点做 FGSM/iFGSM ε 扫描")
    attack.add_argument("--checkpoint", required=True)
    attack.add_argument("--epsilons", default="0,0.05,0.1", help="逗号分隔的 ε 列表")
    attack.add_argument("--mode", default="non-targeted", choices=ATTACK_MODES)
    attack.add_argument("--k", type=int, default=1, help="迭代次数，1 为 FGSM")
    attack.add_argument("--n-eval", type=int, default=500)
    attack.add_argument("--method", default=None, help="结果中的方法名，缺省为检查点文件名")
    attack.add_argument("--output", default=None, help="扫描结果 CSV 路径")
    attack.set_defaults(handler=cmd_attack)

    report = sub.add_parser("report", help="汇总目录下的扫描结果为 report.csv")
    report.add_argument("--dir", required=True)
    report.set_defaults(handler=cmd_report)

    selftest = sub.add_parser("selftest", help="运行有限差分与不变量自检")
    selftest.add_argument("--suite", action="append", choices=list(SUITES), default=None)
    selftest.set_defaults(handler=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
