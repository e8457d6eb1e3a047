#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置管理器 - 项目配置 (config.yaml) 与单次运行配置 (JSON) 的加载和校验
"""

import copy
import logging
import os
from typing import Any, Dict, List

import yaml

from great.core.models import RunConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "GREAT_OUTPUT_ROOT"


class ConfigError(ValueError):
    """配置文件无效：未知键、引用文件不存在或字段取值非法"""


class ConfigManager:
    """配置管理器类"""

    _config_cache = None
    _config_file = "config.yaml"

    @classmethod
    def _get_config_path(cls):
        """获取配置文件的绝对路径"""
        # 首先尝试当前目录
        current_dir_config = os.path.join(os.getcwd(), cls._config_file)
        if os.path.exists(current_dir_config):
            return current_dir_config

        # 然后尝试项目根目录
        script_dir = os.path.dirname(os.path.abspath(__file__))
        root_config = os.path.join(os.path.dirname(os.path.dirname(script_dir)), cls._config_file)
        if os.path.exists(root_config):
            return root_config
        return None

    @classmethod
    def load_config(cls) -> Dict[str, Any]:
        """加载项目配置，缺失的部分用默认值补齐"""
        if cls._config_cache is None:
            config = cls._get_default_config()
            cls._deep_update(config, cls._load_config_from_file())
            cls._config_cache = config
        return cls._config_cache

    @classmethod
    def _load_config_from_file(cls) -> Dict[str, Any]:
        config_path = cls._get_config_path()
        if config_path is None:
            logger.warning(f"⚠️ 未找到 {cls._config_file}，使用默认配置")
            return {}
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                return yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            logger.error(f"❌ 配置文件加载失败: {e}")
            return {}

    @classmethod
    def _get_default_config(cls) -> Dict[str, Any]:
        return {
            "app": {"name": "GREAT", "log_level": "INFO"},
            "storage": {"base_path": "./runs"},
            "defaults": {},
        }

    @classmethod
    def get_app_config(cls) -> Dict[str, Any]:
        return cls.load_config().get("app", {})

    @classmethod
    def get_storage_config(cls) -> Dict[str, Any]:
        return cls.load_config().get("storage", {})

    @classmethod
    def get_run_defaults(cls) -> Dict[str, Any]:
        """内置运行默认值，叠加 config.yaml 中 defaults 段"""
        defaults = RunConfig().to_dict()
        overrides = cls.load_config().get("defaults") or {}
        unknown = unknown_keys(overrides, defaults)
        if unknown:
            raise ConfigError(f"config.yaml defaults 含未知键: {', '.join(unknown)}")
        cls._deep_update(defaults, overrides)
        return defaults

    @classmethod
    def output_root(cls) -> str:
        return os.environ.get(OUTPUT_ROOT_ENV) or cls.get_storage_config().get("base_path", "./runs")

    @classmethod
    def reload_config(cls):
        """重新加载配置"""
        cls._config_cache = None
        return cls.load_config()

    @staticmethod
    def _deep_update(base_dict: Dict, update_dict: Dict):
        """深度更新字典"""
        for key, value in update_dict.items():
            if key in base_dict and isinstance(base_dict[key], dict) and isinstance(value, dict):
                ConfigManager._deep_update(base_dict[key], value)
            else:
                base_dict[key] = value


def unknown_keys(data: Dict, reference: Dict, prefix: str = "") -> List[str]:
    """返回 data 中不在 reference 里的键（点分路径）"""
    found = []
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in reference:
            found.append(path)
        elif isinstance(reference[key], dict) and isinstance(value, dict):
            found.extend(unknown_keys(value, reference[key], path + "."))
    return found


def _check_references(config: RunConfig):
    if config.dataset.kind in ("idx", "manifest"):
        if not config.dataset.path or not os.path.exists(config.dataset.path):
            raise ConfigError(f"dataset.path 不存在: {config.dataset.path}")
    checkpoint = config.distill.teacher_checkpoint
    if checkpoint and not os.path.exists(checkpoint):
        raise ConfigError(f"distill.teacher_checkpoint 不存在: {checkpoint}")


def build_run_config(data: Dict, resolve_output: bool = True) -> RunConfig:
    """把运行配置字典叠加到默认值上并校验"""
    if not isinstance(data, dict):
        raise ConfigError("运行配置必须是 JSON 对象")
    defaults = ConfigManager.get_run_defaults()
    unknown = unknown_keys(data, defaults)
    if unknown:
        raise ConfigError(f"未知配置键: {', '.join(unknown)}")
    merged = copy.deepcopy(defaults)
    ConfigManager._deep_update(merged, data)
    try:
        config = RunConfig.from_dict(merged)
        config.attacks.build_specs()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"配置取值非法: {e}") from e
    if resolve_output and not os.path.isabs(config.output_dir):
        config.output_dir = os.path.join(ConfigManager.output_root(), config.output_dir)
    _check_references(config)
    return config


def load_run_config(path: str) -> RunConfig:
    """
    读取并校验单个运行配置文件

    Raises:
        ConfigError: 文件不可读、未知键、取值非法或引用文件不存在
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件 {path} 解析失败: {e}") from e
    config = build_run_config(data or {})
    logger.info(f"✅ 已加载运行配置 {path} ({config.pipeline})")
    return config
