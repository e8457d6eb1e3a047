#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GREAT 实验启动脚本
"""

import os
import sys

from cli.app import main
from great.core.config_manager import ConfigManager


def ensure_directories():
    """确保输出根目录存在"""
    root = ConfigManager.output_root()
    os.makedirs(root, exist_ok=True)
    print(f"✓ 确保目录存在: {root}")


if __name__ == "__main__":
    print("🚀 启动 GREAT 实验工具...")
    if not os.path.exists("config.yaml"):
        print("⚠️ 未找到 config.yaml，使用内置默认配置")
    ensure_directories()
    sys.exit(main())
