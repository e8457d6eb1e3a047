#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
多任务学习 - 梯度对齐层 (GAL) 与任务梯度分类器

共享编码器收到的上游梯度为 Σ g_i·γ_i；γ 只在反向传播中起作用，
且只由任务分类器经梯度反转送回的信号训练
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from great.core.defense import StepAborted
from great.core.models import MultitaskStepReport
from great.core.net import (
    Adam, Model, MultiHeadModel, Optimizer, cosine_loss, mse, named_grads, softmax_cross_entropy,
)
from great.core.tape import (
    NonFiniteError, Tape, Tensor, backward, concat, gradient_reversal, no_grad, reduce_sum,
)

logger = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "cross_entropy", "cosine")
INITIAL_LOSS_FLOOR = 1e-12


@dataclass
class TaskSpec:
    name: str
    loss: str = "mse"

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"任务 {self.name} 的损失类型 {self.loss} 未知, 可选 {LOSS_KINDS}")

    def compute_loss(self, prediction: Tensor, target: np.ndarray) -> Tensor:
        if self.loss == "cross_entropy":
            return softmax_cross_entropy(prediction, target).loss
        if self.loss == "cosine":
            return cosine_loss(prediction, target)
        return mse(prediction, target)


@dataclass
class TaskSet:
    """任务集合与各任务的初始损失 C⁰"""
    tasks: List[TaskSpec]
    initial_losses: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"任务名重复: {names}")

    @property
    def names(self) -> List[str]:
        return [t.name for t in self.tasks]

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def recorded(self) -> bool:
        return len(self.initial_losses) == len(self.tasks)

    def record_initial(self, losses: Dict[str, float]):
        for name in self.names:
            value = float(losses[name])
            if value <= INITIAL_LOSS_FLOOR:
                raise ValueError(f"任务 {name} 初始损失 {value} 过小，无法归一化")
            self.initial_losses[name] = value
        logger.info(f"📊 记录初始任务损失: {self.initial_losses}")


class GalBank:
    """每个任务一个与共享特征同形（不含批维）的正缩放张量 γ，初始为 1"""

    def __init__(self, names: Sequence[str], feature_shape: Sequence[int], floor: float = 1e-6):
        self.floor = floor
        self.gammas: Dict[str, Tensor] = OrderedDict(
            (name, Tensor(np.ones(tuple(feature_shape)), requires_grad=True, name=f"gamma.{name}"))
            for name in names
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.gammas[name]

    def parameters(self) -> Dict[str, Tensor]:
        return self.gammas

    def check_positive(self):
        for name, gamma in self.gammas.items():
            if np.any(gamma.data <= 0):
                raise ValueError(f"GAL {name} 存在非正元素 (min={gamma.data.min()})")

    def clamp(self):
        for gamma in self.gammas.values():
            gamma.data = np.maximum(gamma.data, self.floor)

    def minimum(self) -> float:
        return float(min(g.data.min() for g in self.gammas.values()))

    def stats(self) -> Dict[str, Dict[str, float]]:
        return OrderedDict(
            (name, {"min": float(g.data.min()), "mean": float(g.data.mean()), "max": float(g.data.max())})
            for name, g in self.gammas.items()
        )


@dataclass
class TaskGradients:
    """一次编码器前向后的各任务损失与特征梯度"""
    feature: Tensor                      # 编码器输出（带图）
    raw_losses: Dict[str, float]
    normalized: Dict[str, Tensor]
    gradients: Dict[str, Tensor]         # g_i^f，形状同特征
    decoder_grads: Dict[str, Dict[str, np.ndarray]]


@dataclass
class MultitaskOptimizers:
    encoder: Optimizer
    decoders: Dict[str, Optimizer]
    classifier: Optional[Optimizer] = None
    gal: Optional[Optimizer] = None

    def all(self) -> List[Optimizer]:
        items = [self.encoder] + list(self.decoders.values())
        return items + [o for o in (self.classifier, self.gal) if o is not None]

    def set_lr_multiplier(self, multiplier: float, gal_multiplier: Optional[float] = None):
        """gal_multiplier 缺省时 GAL 与其余网络同步衰减"""
        for optimizer in self.all():
            optimizer.set_lr_multiplier(multiplier)
        if self.gal is not None and gal_multiplier is not None:
            self.gal.set_lr_multiplier(gal_multiplier)


def build_gal_optimizer(gals: GalBank, lr: float, ratio: float = 10.0) -> Adam:
    """GAL 使用主学习率的 ratio 倍的 Adam"""
    return Adam(gals.parameters(), lr * ratio)

# ---------------------------------------------------------------- 运算

def normalize_task_losses(losses: Dict, initial: Dict[str, float]) -> Dict:
    """C_i / C_i⁰；Tensor 损失返回 Tensor，浮点返回浮点"""
    normalized = OrderedDict()
    for name, value in losses.items():
        if name not in initial:
            raise KeyError(f"任务 {name} 尚未记录初始损失")
        base = initial[name]
        if base <= INITIAL_LOSS_FLOOR:
            raise ValueError(f"任务 {name} 初始损失 {base} <= {INITIAL_LOSS_FLOOR}，无法归一化")
        normalized[name] = value / base
    return normalized


def task_feature_gradients(model: MultiHeadModel, x: np.ndarray, targets: Dict[str, np.ndarray],
                           task_set: TaskSet, create_graph: bool = True) -> TaskGradients:
    """
    一次编码器前向，逐任务求归一化损失对共享特征 f 的梯度，以及对解码器参数的梯度

    必须在活动磁带内调用；首次调用时记录 C⁰
    """
    feature = model.encoder(Tensor(x))
    f_leaf = Tensor(feature.data, requires_grad=True, name="f")
    losses = OrderedDict()
    for task in task_set.tasks:
        losses[task.name] = task.compute_loss(model.decoders[task.name](f_leaf), targets[task.name])
    raw = OrderedDict((name, loss.item()) for name, loss in losses.items())
    if not task_set.recorded:
        task_set.record_initial(raw)
    normalized = normalize_task_losses(losses, task_set.initial_losses)

    gradients, decoder_grads = OrderedDict(), OrderedDict()
    for name, loss in normalized.items():
        params = model.decoders[name].parameters()
        grads = backward(loss, [f_leaf] + list(params.values()), create_graph=create_graph)
        gradients[name] = grads[f_leaf]
        decoder_grads[name] = named_grads(params, grads)
    return TaskGradients(feature, raw, normalized, gradients, decoder_grads)


def gal_scaled_encoder_update(encoder: Model, feature: Tensor, gradients: Dict[str, Tensor],
                              gals: GalBank, optimizer: Optional[Optimizer]) -> Dict[str, np.ndarray]:
    """
    以 Σ_i g_i ⊙ γ_i 作为 f 处的上游梯度更新编码器

    Returns:
        编码器参数梯度；optimizer 为 None 时只计算不更新
    """
    gals.check_positive()
    upstream = sum(gradients[name].data * gals[name].data for name in gradients)
    params = encoder.parameters()
    grads = named_grads(params, backward(reduce_sum(feature * upstream), list(params.values())))
    if optimizer is not None:
        optimizer.step(grads)
    return grads


def _classifier_batch(gradients: Dict[str, Tensor], gals: GalBank, names: Sequence[str],
                      reversal: float) -> Tuple[Tensor, np.ndarray]:
    """拼接各任务的 g_i·γ_i（乘以批大小抵消均值损失的 1/B），标签为任务序号"""
    pieces, labels = [], []
    for index, name in enumerate(names):
        g = gradients[name].data
        batch = g.shape[0]
        pieces.append(Tensor(g * batch) * gradient_reversal(gals[name], reversal))
        labels.append(np.full(batch, index, dtype=np.int64))
    return concat(pieces, axis=0), np.concatenate(labels)


def task_classifier_gradients(classifier: Model, gradients: Dict[str, Tensor], gals: GalBank,
                              task_names: Sequence[str]
                              ) -> Tuple[float, float, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """
    任务分类器判断梯度样本来自哪个任务，只求梯度不更新

    Returns:
        (loss, accuracy, 分类器参数梯度, 各 γ 的反转梯度)
    """
    if len(task_names) < 2:
        raise ValueError("任务分类器至少需要 2 个任务")
    params = classifier.parameters()
    with Tape():
        inputs, labels = _classifier_batch(gradients, gals, task_names, 1.0)
        ce = softmax_cross_entropy(classifier(inputs), labels)
        grads = backward(ce.loss, list(params.values()) + list(gals.parameters().values()))
    accuracy = float(np.mean(np.argmax(ce.probs, axis=1) == labels))
    return ce.loss.item(), accuracy, named_grads(params, grads), named_grads(gals.parameters(), grads)


def aux_task_classifier_step(classifier: Model, gradients: Dict[str, Tensor], gals: GalBank,
                             task_names: Sequence[str], optimizer: Optional[Optimizer]
                             ) -> Tuple[float, float, Dict[str, np.ndarray]]:
    """
    训练任务分类器一步

    Returns:
        (loss, accuracy, 各 γ 的反转梯度)
    """
    loss, accuracy, classifier_grads, gamma_grads = task_classifier_gradients(
        classifier, gradients, gals, task_names)
    if optimizer is not None:
        optimizer.step(classifier_grads)
    return loss, accuracy, gamma_grads


def gal_update(gals: GalBank, reversed_grads: Dict[str, np.ndarray], optimizer: Optimizer,
               floor: Optional[float] = None):
    """按反转梯度更新 γ，随后逐元素截断到下限"""
    optimizer.step(reversed_grads)
    if floor is not None:
        gals.floor = floor
    gals.clamp()


def _require_finite(groups: Dict[str, Dict[str, np.ndarray]]):
    for group, grads in groups.items():
        for name, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"{group} 参数 {name} 的梯度含非有限值")


def multitask_train_step(model: MultiHeadModel, gals: GalBank, classifier: Optional[Model],
                         task_set: TaskSet, x: np.ndarray, targets: Dict[str, np.ndarray],
                         optimizers: MultitaskOptimizers, gal_mode: str = "great") -> MultitaskStepReport:
    """
    一步多任务训练：归一化损失、逐任务特征梯度、解码器更新、GAL 缩放的编码器更新、
    任务分类器更新、GAL 更新

    所有梯度先在同一组参数上求出并检查有限性，之后才依次更新；任一处出现非有限值时
    抛出 StepAborted，编码器、解码器、分类器与 γ 均保持原样

    Args:
        gal_mode: great 正常训练 γ；frozen 保持 γ 不变但仍训练分类器；off 关闭分类器（等权基线）
    """
    use_classifier = classifier is not None and gal_mode != "off" and len(task_set) >= 2
    partial: Dict = {}
    classifier_out = None
    try:
        with Tape():
            result = task_feature_gradients(model, x, targets, task_set)
            partial["raw_losses"] = dict(result.raw_losses)
            encoder_grads = gal_scaled_encoder_update(model.encoder, result.feature, result.gradients,
                                                      gals, None)
        if use_classifier:
            classifier_out = task_classifier_gradients(classifier, result.gradients, gals, task_set.names)
            partial["classifier_loss"] = classifier_out[0]
        groups = OrderedDict((f"decoder_{k}", v) for k, v in result.decoder_grads.items())
        groups["encoder"] = encoder_grads
        if classifier_out is not None:
            groups["classifier"], groups["gal"] = classifier_out[2], classifier_out[3]
        _require_finite(groups)
    except NonFiniteError as e:
        logger.error(f"❌ 多任务训练步中止: {e}")
        raise StepAborted(str(e), partial) from e

    for name, grads in result.decoder_grads.items():
        optimizers.decoders[name].step(grads)
    optimizers.encoder.step(encoder_grads)

    report = MultitaskStepReport(
        raw_losses=result.raw_losses,
        normalized_losses=OrderedDict((k, v.item()) for k, v in result.normalized.items()),
    )
    if classifier_out is not None:
        loss, accuracy, classifier_grads, gamma_grads = classifier_out
        report.classifier_loss, report.classifier_accuracy = loss, accuracy
        if optimizers.classifier is not None:
            optimizers.classifier.step(classifier_grads)
        if gal_mode == "great":
            gal_update(gals, gamma_grads, optimizers.gal)
    report.gamma_stats = gals.stats()
    return report


# ---------------------------------------------------------------- 评估

def evaluate_multitask(model: MultiHeadModel, task_set: TaskSet, x: np.ndarray,
                       targets: Dict[str, np.ndarray]) -> Dict[str, float]:
    """测试集上的原始与归一化任务损失，以及归一化损失之和"""
    with no_grad():
        _, predictions = model(Tensor(x))
        raw = OrderedDict(
            (task.name, task.compute_loss(predictions[task.name], targets[task.name]).item())
            for task in task_set.tasks
        )
    row: Dict[str, float] = OrderedDict()
    for name, value in raw.items():
        row[f"test_loss_{name}"] = value
    if task_set.recorded:
        normalized = normalize_task_losses(raw, task_set.initial_losses)
        for name, value in normalized.items():
            row[f"test_norm_loss_{name}"] = value
        row["test_combined_norm_loss"] = float(sum(normalized.values()))
    return row


def task_classifier_accuracy(model: MultiHeadModel, gals: GalBank, classifier: Model, task_set: TaskSet,
                             x: np.ndarray, targets: Dict[str, np.ndarray]) -> float:
    """留出样本上任务分类器的准确率（不更新任何参数）"""
    with Tape():
        result = task_feature_gradients(model, x, targets, task_set, create_graph=False)
    with no_grad():
        inputs, labels = _classifier_batch(result.gradients, gals, task_set.names, 1.0)
        predictions = np.argmax(classifier(inputs).data, axis=1)
    return float(np.mean(predictions == labels))
