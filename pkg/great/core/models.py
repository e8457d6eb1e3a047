#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GREAT 工具包数据模型定义
"""

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

ATTACK_MODES = ("non-targeted", "targeted-worst", "targeted-random")
PIPELINES = ("defense", "distill", "multitask", "baseline", "adversarial-baseline")
DATASET_KINDS = ("synthetic_classification", "synthetic_images", "synthetic_two_task", "image_multitask",
                 "idx", "manifest")


def _from_known(cls, data: Dict):
    """只取 dataclass 声明过的字段"""
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in (data or {}).items() if k in names})


@dataclass
class AttackSpec:
    """攻击参数：ε 为 ∞ 范数预算，k 为迭代次数（FGSM 时为 1）"""
    epsilon: float = 0.1
    k: int = 1
    mode: str = "non-targeted"
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon 必须非负, 收到 {self.epsilon}")
        if self.k < 1:
            raise ValueError(f"k 必须 >= 1, 收到 {self.k}")
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"未知攻击模式 {self.mode}, 可选 {ATTACK_MODES}")
        if not self.lo < self.hi:
            raise ValueError(f"像素有效范围非法: [{self.lo}, {self.hi}]")

    @property
    def attack(self) -> str:
        return "fgsm" if self.k == 1 else "ifgsm"

    @property
    def targeted(self) -> bool:
        return self.mode != "non-targeted"

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ScheduleValue:
    """某个 epoch 的调度结果"""
    lr_multiplier: float
    alpha: float
    beta: float
    ramp: float = 0.0               # α、β 相对各自上限的比例


@dataclass
class Schedule:
    """学习率乘子 (1-e/e_max)^0.9，α、β 按 max*(1-lr) 递增"""
    e_max: int
    exponent: float = 0.9
    alpha_max: float = 1.0
    beta_max: float = 2.0
    base_lr: float = 0.001

    def __post_init__(self):
        if self.e_max < 1:
            raise ValueError(f"e_max 必须 >= 1, 收到 {self.e_max}")

    def evaluate(self, epoch: float) -> ScheduleValue:
        if epoch < 0 or epoch > self.e_max:
            raise ValueError(f"epoch {epoch} 超出范围 [0, {self.e_max}]")
        multiplier = (1.0 - epoch / self.e_max) ** self.exponent
        return ScheduleValue(
            lr_multiplier=multiplier,
            alpha=self.alpha_max * (1.0 - multiplier),
            beta=self.beta_max * (1.0 - multiplier),
            ramp=1.0 - multiplier,
        )

    def training_value(self, epoch: int) -> ScheduleValue:
        """训练循环第 epoch 轮（0 起）的调度

        学习率乘子仍取 (1-e/e_max)^0.9，训练轮内永不为 0；α、β 的爬升按
        最后一轮归一化，第 0 轮为 0、最后一轮恰好到达上限。
        """
        if epoch < 0 or epoch >= self.e_max:
            raise ValueError(f"训练轮 {epoch} 超出范围 [0, {self.e_max})")
        multiplier = (1.0 - epoch / self.e_max) ** self.exponent
        ramp = 0.0 if self.e_max == 1 else 1.0 - (1.0 - epoch / (self.e_max - 1)) ** self.exponent
        return ScheduleValue(
            lr_multiplier=multiplier,
            alpha=self.alpha_max * ramp,
            beta=self.beta_max * ramp,
            ramp=ramp,
        )


@dataclass
class GreaceConfig:
    """对抗防御配置"""
    alpha_max: float = 1.0          # 辅助损失权重上限
    beta_max: float = 2.0           # 负类惩罚上限
    masked: bool = True             # 只回传真实类别分量
    normalize_gradients: bool = False  # 逐样本 L2 归一化（消融用）
    probe: bool = False             # 每步记录反向信号探针

    def __post_init__(self):
        if self.alpha_max < 0 or self.beta_max < 0:
            raise ValueError("alpha_max 与 beta_max 必须非负")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class DistillConfig:
    """知识蒸馏配置"""
    method: str = "great"           # great | soft_target | supervised
    alpha: float = 0.1
    temperature: float = 20.0
    mix: float = 0.1
    fraction: float = 1.0           # 1.0 为密集, 0.05 为稀疏
    teacher_checkpoint: Optional[str] = None
    teacher_epochs: int = 5
    teacher_width: int = 16
    standardize_gradients: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha 必须在 [0,1] 内, 收到 {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"温度必须为正, 收到 {self.temperature}")
        if self.method not in ("great", "soft_target", "supervised"):
            raise ValueError(f"未知蒸馏方法 {self.method}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction 必须在 (0,1] 内, 收到 {self.fraction}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class MultitaskConfig:
    """多任务配置"""
    suite: str = "two_task"         # two_task | image
    scale: float = 100.0
    n_train: int = 512
    n_test: int = 256
    input_dim: int = 8
    feature_dim: int = 16
    gal_mode: str = "great"         # great | frozen | off
    gal_lr_ratio: float = 10.0      # GAL 学习率 / 主学习率
    classifier_lr_ratio: float = 10.0  # 任务分类器学习率 / 主学习率
    gal_floor: float = 1e-6

    def __post_init__(self):
        if self.gal_mode not in ("great", "frozen", "off"):
            raise ValueError(f"未知 GAL 模式 {self.gal_mode}")
        if self.suite not in ("two_task", "image"):
            raise ValueError(f"未知多任务数据集 {self.suite}")
        if self.gal_lr_ratio <= 0 or self.classifier_lr_ratio <= 0:
            raise ValueError("gal_lr_ratio 与 classifier_lr_ratio 必须为正")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class DatasetConfig:
    kind: str = "synthetic_classification"   # 见 DATASET_KINDS
    path: Optional[str] = None
    n_train: int = 1000
    n_test: int = 500
    classes: int = 10
    shape: List[int] = field(default_factory=lambda: [1, 8, 8])
    noise: float = 0.15
    fraction: float = 1.0
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"未知数据集类型 {self.kind}, 可选 {DATASET_KINDS}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction 必须在 (0,1] 内, 收到 {self.fraction}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ModelConfig:
    builder: str = "resnet_small"   # resnet_small | mlp
    width: int = 16
    blocks: int = 4
    hidden: List[int] = field(default_factory=lambda: [64])

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class OptimizerConfig:
    kind: str = "adam"              # adam | sgd
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainingConfig:
    epochs: int = 5
    batch_size: int = 64
    exponent: float = 0.9

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AttackConfig:
    epsilons: List[float] = field(default_factory=lambda: [0.0, 0.05, 0.1])
    specs: List[Dict] = field(default_factory=lambda: [
        {"k": 1, "mode": "non-targeted"},
        {"k": 10, "mode": "non-targeted"},
    ])
    n_eval: int = 500
    adversarial_epsilon: float = 0.2

    def build_specs(self) -> List[AttackSpec]:
        return [AttackSpec(**spec) for spec in self.specs]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class RunConfig:
    """一次实验运行的完整配置"""
    pipeline: str = "baseline"
    method: Optional[str] = None
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    defense: GreaceConfig = field(default_factory=GreaceConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    multitask: MultitaskConfig = field(default_factory=MultitaskConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"未知流水线 {self.pipeline}, 可选 {PIPELINES}")

    @property
    def label(self) -> str:
        return self.method or self.pipeline

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        """从字典创建 RunConfig 实例"""
        return cls(
            pipeline=data.get("pipeline", "baseline"),
            method=data.get("method"),
            seed=data.get("seed", 0),
            output_dir=data.get("output_dir", "runs/default"),
            dataset=_from_known(DatasetConfig, data.get("dataset")),
            model=_from_known(ModelConfig, data.get("model")),
            optimizer=_from_known(OptimizerConfig, data.get("optimizer")),
            training=_from_known(TrainingConfig, data.get("training")),
            defense=_from_known(GreaceConfig, data.get("defense")),
            distill=_from_known(DistillConfig, data.get("distill")),
            multitask=_from_known(MultitaskConfig, data.get("multitask")),
            attacks=_from_known(AttackConfig, data.get("attacks")),
        )


@dataclass
class DefenseStepReport:
    """防御训练单步报告"""
    main_loss: float
    aux_loss: float
    aux_accuracy: float
    masked_grad_norm: float         # 逐样本掩码梯度 L2 范数均值
    alpha: float
    beta: float
    probe_norms: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "main_loss": self.main_loss,
            "aux_loss": self.aux_loss,
            "aux_accuracy": self.aux_accuracy,
            "masked_grad_norm": self.masked_grad_norm,
            "alpha": self.alpha,
            "beta": self.beta,
            "probe_norms": list(self.probe_norms),
        }


@dataclass
class DistillStepReport:
    """蒸馏训练单步报告"""
    student_loss: float
    disc_loss: float = 0.0
    d_value: float = 0.0
    disc_accuracy: float = 0.0
    kl_loss: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class MultitaskStepReport:
    """多任务训练单步报告"""
    raw_losses: Dict[str, float]
    normalized_losses: Dict[str, float]
    classifier_loss: Optional[float] = None
    classifier_accuracy: Optional[float] = None
    gamma_stats: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """展平为一行指标"""
        row: Dict[str, float] = {}
        for name, value in self.raw_losses.items():
            row[f"loss_{name}"] = value
        for name, value in self.normalized_losses.items():
            row[f"norm_loss_{name}"] = value
        row["classifier_loss"] = self.classifier_loss
        row["classifier_accuracy"] = self.classifier_accuracy
        for name, stats in self.gamma_stats.items():
            for key, value in stats.items():
                row[f"gamma_{name}_{key}"] = value
        return row
