#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
知识蒸馏 - 判别器区分教师与学生的输入梯度，学生经梯度反转去迷惑判别器；
另含经典软目标（温度 KL）蒸馏基线
"""

import logging
from typing import Dict, Optional, Union

import numpy as np

from great.core.defense import StepAborted, input_gradient_graph
from great.core.models import DistillConfig, DistillStepReport
from great.core.net import (
    Model, Optimizer, build_mlp, build_resnet_small, named_grads, softmax_cross_entropy,
)
from great.core.tape import (
    NonFiniteError, Tape, Tensor, backward, clip, gradient_reversal, log, log_softmax, no_grad,
    reduce_mean, reduce_sum, softmax, sqrt,
)

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

TensorLike = Union[Tensor, np.ndarray]


def build_discriminator(descriptor: Dict, seed: int = 7) -> Model:
    """判别器：学生拓扑减半深度，激活换成 leaky_relu(0.2)，输出 2 类"""
    shape = descriptor["input_shape"]
    if descriptor.get("builder") == "mlp":
        hidden = list(descriptor.get("hidden", [64]))
        hidden = hidden[:max(1, len(hidden) // 2)]
        return build_mlp(shape, hidden, 2, activation="leaky_relu", slope=0.2, seed=seed)
    blocks = max(1, int(descriptor.get("blocks", 4)) // 2)
    return build_resnet_small(shape, 2, descriptor.get("width", 16), blocks, "leaky_relu", 0.2, seed)


def standardize_per_sample(g: Tensor) -> Tensor:
    """逐样本减均值、除标准差"""
    axes = tuple(range(1, g.ndim))
    centered = g - reduce_mean(g, axis=axes, keepdims=True)
    return centered / sqrt(reduce_mean(centered * centered, axis=axes, keepdims=True) + 1e-12)


def discriminator_probability(discriminator: Model, g: TensorLike) -> Tensor:
    """判别器判为“教师梯度”的概率"""
    g = g if isinstance(g, Tensor) else Tensor(g)
    return softmax(discriminator(g), axis=1)[:, 1]


def discriminator_loss(p_teacher: TensorLike, p_student: TensorLike) -> Tensor:
    """
    D = E log f(t) + E log(1 - f(s))，概率先截断到 [1e-12, 1-1e-12]

    判别器最大化 D，即最小化以教师为 1、学生为 0 的二元交叉熵
    """
    p_t = clip(p_teacher, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_s = clip(p_student, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return reduce_mean(log(p_t)) + reduce_mean(log(1.0 - p_s))


def teacher_gradient(teacher: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """教师在真实标签上的逐样本输入梯度，不建图"""
    with Tape():
        g, _ = input_gradient_graph(teacher, x, y, masked=False, create_graph=False)
    return g.data


def student_gradient(student: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with Tape():
        g, _ = input_gradient_graph(student, x, y, masked=False, create_graph=False)
    return g.data


def discriminator_accuracy(discriminator: Model, g_teacher: np.ndarray, g_student: np.ndarray,
                           standardize: bool = False) -> float:
    """教师梯度判为 1、学生梯度判为 0 的比例"""
    with no_grad():
        t_in, s_in = Tensor(g_teacher), Tensor(g_student)
        if standardize:
            t_in, s_in = standardize_per_sample(t_in), standardize_per_sample(s_in)
        p_t = discriminator_probability(discriminator, t_in).data
        p_s = discriminator_probability(discriminator, s_in).data
    hits = np.sum(p_t > 0.5) + np.sum(p_s <= 0.5)
    return float(hits / (len(p_t) + len(p_s)))


def distill_train_step(student: Model, teacher: Model, discriminator: Model, x: np.ndarray,
                       y: np.ndarray, config: DistillConfig, student_optimizer: Optimizer,
                       disc_optimizer: Optimizer) -> DistillStepReport:
    """
    一步 GREAT 蒸馏

    学生目标 (1-α)J + αD：监督损失加上经梯度反转 (λ=α) 流回 g_s 的判别器信号；
    判别器先更新，随后学生更新，二者梯度都在更新前的参数上计算
    """
    y = np.asarray(y, dtype=np.int64)
    alpha = config.alpha
    g_teacher = teacher_gradient(teacher, x, y)
    student_params = student.parameters()
    disc_params = discriminator.parameters()
    partial: Dict = {}
    try:
        with Tape():
            g_student, logits = input_gradient_graph(student, x, y, masked=False, create_graph=True)
            ce = softmax_cross_entropy(logits, y)
            partial["student_loss"] = ce.loss.item()

            t_in, s_in = Tensor(g_teacher), gradient_reversal(g_student, alpha)
            if config.standardize_gradients:
                t_in, s_in = standardize_per_sample(t_in), standardize_per_sample(s_in)
            p_t = discriminator_probability(discriminator, t_in)
            p_s = discriminator_probability(discriminator, s_in)
            d_value = discriminator_loss(p_t, p_s)
            partial["d_value"] = d_value.item()

            total = (1.0 - alpha) * ce.loss - d_value
            grads = backward(total, list(student_params.values()) + list(disc_params.values()))
    except NonFiniteError as e:
        logger.error(f"❌ 蒸馏训练步中止: {e}")
        raise StepAborted(str(e), partial) from e

    hits = np.sum(p_t.data > 0.5) + np.sum(p_s.data <= 0.5)
    report = DistillStepReport(
        student_loss=partial["student_loss"],
        disc_loss=-partial["d_value"],
        d_value=partial["d_value"],
        disc_accuracy=float(hits / (2 * len(y))),
    )
    if not (np.isfinite(report.student_loss) and np.isfinite(report.d_value)):
        raise StepAborted("蒸馏损失含非有限值", report.to_dict())

    disc_optimizer.step(named_grads(disc_params, grads))
    student_optimizer.step(named_grads(student_params, grads))
    return report


def soft_target_loss(student_logits: Tensor, teacher_logits: np.ndarray, temperature: float) -> Tensor:
    """T²·KL(softmax(t/T) ‖ softmax(s/T))，批均值"""
    if temperature <= 0:
        raise ValueError(f"温度必须为正, 收到 {temperature}")
    with no_grad():
        teacher_log = log_softmax(Tensor(teacher_logits) / temperature, axis=1).data
    teacher_probs = np.exp(teacher_log)
    student_log = log_softmax(student_logits / temperature, axis=1)
    kl = reduce_sum(teacher_probs * (teacher_log - student_log), axis=1)
    return (temperature ** 2) * reduce_mean(kl)


def soft_target_baseline_step(student: Model, teacher: Model, x: np.ndarray, y: np.ndarray,
                              temperature: float, mix: float, optimizer: Optimizer) -> DistillStepReport:
    """经典蒸馏：(1-mix)·CE + mix·T²·KL"""
    if temperature <= 0:
        raise ValueError(f"温度必须为正, 收到 {temperature}")
    with no_grad():
        teacher_logits = teacher(Tensor(x)).data
    params = student.parameters()
    with Tape():
        logits = student(Tensor(x))
        ce = softmax_cross_entropy(logits, y)
        kl = soft_target_loss(logits, teacher_logits, temperature)
        loss = (1.0 - mix) * ce.loss + mix * kl
        grads = backward(loss, list(params.values()))
    optimizer.step(named_grads(params, grads))
    return DistillStepReport(student_loss=ce.loss.item(), kl_loss=kl.item())


def heldout_discriminator_accuracy(student: Model, teacher: Model, discriminator: Model,
                                   x: np.ndarray, y: np.ndarray, standardize: bool = False,
                                   batch_size: Optional[int] = None) -> float:
    """在留出样本的梯度上评估判别器"""
    size = batch_size or len(x)
    scores, total = 0.0, 0
    for start in range(0, len(x), size):
        xb, yb = x[start:start + size], y[start:start + size]
        accuracy = discriminator_accuracy(discriminator, teacher_gradient(teacher, xb, yb),
                                          student_gradient(student, xb, yb), standardize)
        scores += accuracy * len(xb)
        total += len(xb)
    return scores / max(total, 1)
