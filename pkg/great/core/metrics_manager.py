#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
指标管理器 - 运行目录中配置快照、指标 CSV、检查点与汇总报告的持久化
"""

import glob
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from great.core.attacks import SWEEP_COLUMNS
from great.core.models import RunConfig
from great.core.net import Model, save_checkpoint

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
SWEEP_FILE = "sweep.csv"
CHECKPOINT_FILE = "model.ckpt"
DIAGNOSTIC_FILE = "diagnostic.json"
REPORT_FILE = "report.csv"


class ReportError(ValueError):
    """指标文件缺失或列不完整"""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MetricsManager:
    """单个运行目录的读写；不写时间戳，重复运行得到逐字节相同的文件"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def save_config(self, config: RunConfig) -> str:
        """保存解析后的配置快照，可直接作为 run --config 的输入"""
        snapshot = config.to_dict()
        target = self.path(CONFIG_FILE)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(snapshot, f, ensure_ascii=False, indent=2, sort_keys=True)
        return target

    def save_metrics(self, rows: List[Dict[str, Any]], name: str = METRICS_FILE,
                     columns: Optional[Sequence[str]] = None) -> str:
        """
        把逐 epoch 指标写成 CSV

        Args:
            rows: 每行一个字典
            columns: 固定列顺序；缺省按首次出现顺序
        """
        if columns is None:
            columns = []
            for row in rows:
                columns.extend(k for k in row if k not in columns)
        frame = pd.DataFrame(rows, columns=list(columns))
        target = self.path(name)
        frame.to_csv(target, index=False)
        logger.info(f"📊 指标已写入 {target} ({len(frame)} 行)")
        return target

    def save_sweep(self, frame: pd.DataFrame) -> str:
        target = self.path(SWEEP_FILE)
        frame.loc[:, SWEEP_COLUMNS].to_csv(target, index=False)
        return target

    def save_checkpoint(self, model: Model, seed: int, step: int, dataset: Optional[Dict] = None,
                        name: str = CHECKPOINT_FILE) -> str:
        target = self.path(name)
        save_checkpoint(target, model, seed, step, {"dataset": dataset} if dataset else None)
        return target

    def save_diagnostic(self, record: Dict[str, Any]) -> str:
        """训练中止时的诊断记录"""
        target = self.path(DIAGNOSTIC_FILE)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(record, f, ensure_ascii=False, indent=2, sort_keys=True, default=str)
        logger.error(f"❌ 诊断记录已写入 {target}")
        return target

    def load_metrics(self, name: str = METRICS_FILE) -> pd.DataFrame:
        return pd.read_csv(self.path(name))


def _read_sweep(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ReportError(f"无法读取: {e}", path) from e
    missing = [c for c in SWEEP_COLUMNS if c not in frame.columns]
    if missing:
        raise ReportError(f"缺少列 {missing}", path)
    return frame.loc[:, SWEEP_COLUMNS]


def build_report(directory: str, write: bool = True) -> pd.DataFrame:
    """
    汇总目录（含子目录）下所有鲁棒性扫描结果，得到按方法区分的 准确率-ε 表

    Returns:
        列为 method, attack, mode, epsilon, k, accuracy, seed 的表
    """
    paths = sorted(glob.glob(os.path.join(directory, "**", SWEEP_FILE), recursive=True))
    if not paths:
        raise ReportError(f"未找到任何 {SWEEP_FILE}", directory)
    frame = pd.concat([_read_sweep(p) for p in paths], ignore_index=True)
    frame = frame.sort_values(["method", "attack", "mode", "k", "seed", "epsilon"], kind="mergesort")
    frame = frame.reset_index(drop=True)
    if write:
        target = os.path.join(directory, REPORT_FILE)
        frame.to_csv(target, index=False)
        logger.info(f"✅ 报告已生成 {target}: {frame['method'].nunique()} 个方法, {len(frame)} 行")
    return frame
