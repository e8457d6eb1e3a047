#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对抗防御 - 主分类器以 GREACE 损失训练，辅助网络对输入梯度做分类，
经梯度反转把对抗信号送回主网络
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from great.core.models import DefenseStepReport, GreaceConfig
from great.core.net import Model, Optimizer, named_grads, softmax_cross_entropy
from great.core.tape import (
    NonFiniteError, Tape, Tensor, active_tape, backward, clip, gradient_reversal, log, log_softmax,
    no_grad, one_hot, reduce_sum, softmax, sqrt,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class StepAborted(RuntimeError):
    """训练步出现非有限值而中止；report 为已计算出的部分指标"""

    def __init__(self, message: str, report: Optional[Dict] = None):
        super().__init__(message)
        self.report = report or {}


# ---------------------------------------------------------------- 梯度张量

def _per_sample_loss(logits: Tensor, y: np.ndarray, masked: bool) -> Tensor:
    """批内逐样本交叉熵之和；求和使每个样本的输入梯度互不混合"""
    encoded = one_hot(y, logits.shape[1])
    if masked:
        # 只保留真实类别的概率分量
        picked = reduce_sum(softmax(logits, axis=1) * encoded, axis=1)
        return -reduce_sum(log(clip(picked, PROB_FLOOR, 1.0)))
    return -reduce_sum(log_softmax(logits, axis=1) * encoded)


def input_gradient_graph(model: Model, x: np.ndarray, y: np.ndarray, masked: bool,
                         create_graph: bool) -> Tuple[Tensor, Tensor]:
    leaf = Tensor(x, requires_grad=True, name="x")
    logits = model(leaf)
    loss = _per_sample_loss(logits, np.asarray(y, dtype=np.int64), masked)
    g = backward(loss, [leaf], create_graph=create_graph)[leaf]
    return g, logits


def masked_input_gradient(model: Model, x: np.ndarray, y: np.ndarray, masked: bool = True,
                          create_graph: bool = True) -> Tensor:
    """
    逐样本输入梯度 g：在 softmax 之后只回传真实类别分量

    Args:
        masked: False 时回传完整的 ∇aC（普通交叉熵下二者相等）
        create_graph: 为 True 时 g 本身是磁带上的可微节点

    Returns:
        与 x 同形状的梯度张量
    """
    if active_tape() is None:
        with Tape():
            return input_gradient_graph(model, x, y, masked, create_graph)[0]
    return input_gradient_graph(model, x, y, masked, create_graph)[0]


def greace_input_gradient_graph(model: Model, x: np.ndarray, y: np.ndarray, aux_probs: np.ndarray,
                                beta: float, create_graph: bool) -> Tuple[Tensor, Tensor]:
    """
    不掩码的输入梯度：把完整的 ∇aĈ = ∇aC + β·σ(á)⊙(1-e_y) 经 softmax 回传到输入

    σ(á) 作为常量参与；β=0 时与交叉熵输入梯度逐位相同
    """
    y = np.asarray(y, dtype=np.int64)
    leaf = Tensor(x, requires_grad=True, name="x")
    logits = model(leaf)
    loss = _per_sample_loss(logits, y, masked=False)
    if beta > 0:
        penalty = np.asarray(aux_probs, dtype=np.float64) * (1.0 - one_hot(y, logits.shape[1]))
        loss = loss + beta * reduce_sum(softmax(logits, axis=1) * penalty)
    g = backward(loss, [leaf], create_graph=create_graph)[leaf]
    return g, logits


def aux_probabilities(model: Model, aux: Model, x: np.ndarray, y: np.ndarray,
                      normalize: bool = False) -> np.ndarray:
    """辅助网络在掩码梯度上的输出 σ(á)，不记录到任何外层磁带"""
    with Tape():
        g = input_gradient_graph(model, x, y, True, create_graph=False)[0]
    with no_grad():
        aux_input = normalize_per_sample(Tensor(g.data)) if normalize else Tensor(g.data)
        return softmax(aux(aux_input), axis=1).data


def training_input_gradient(model: Model, aux: Model, x: np.ndarray, y: np.ndarray, masked: bool,
                            beta: float = 0.0, normalize: bool = False,
                            create_graph: bool = True) -> Tuple[Tensor, Tensor]:
    """
    训练时送入辅助网络的梯度张量及主网络 logits

    masked 时只回传真实类别分量；否则回传带负类惩罚的完整 GREACE 梯度，
    其中 σ(á) 取自辅助网络在掩码梯度上的预测
    """
    if masked or beta <= 0:
        return input_gradient_graph(model, x, y, masked, create_graph)
    probs = aux_probabilities(model, aux, x, y, normalize)
    return greace_input_gradient_graph(model, x, y, probs, beta, create_graph)


def mask_probability_gradient(grad_probs: np.ndarray, y) -> np.ndarray:
    """只保留真实类别位置的概率梯度"""
    grad_probs = np.asarray(grad_probs, dtype=np.float64)
    if grad_probs.ndim == 1:
        return grad_probs * one_hot(np.array([y]), grad_probs.shape[0])[0]
    return grad_probs * one_hot(np.asarray(y), grad_probs.shape[1])


def normalize_per_sample(g: Tensor) -> Tensor:
    """逐样本 L2 归一化"""
    axes = tuple(range(1, g.ndim))
    return g / sqrt(reduce_sum(g * g, axis=axes, keepdims=True) + 1e-12)


def greace_output_gradient(grad_a_C: np.ndarray, aux_probs: np.ndarray, y, beta: float) -> np.ndarray:
    """
    GREACE 输出梯度：在每个负类位置加上 β·σ(á)，真实类别位置保持不变
    """
    if beta < 0:
        raise ValueError(f"beta 必须非负, 收到 {beta}")
    grad_a_C = np.asarray(grad_a_C, dtype=np.float64)
    aux_probs = np.asarray(aux_probs, dtype=np.float64)
    if grad_a_C.shape != aux_probs.shape:
        raise ValueError(f"梯度形状 {grad_a_C.shape} 与辅助概率形状 {aux_probs.shape} 不一致")
    if not np.allclose(aux_probs.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("辅助网络输出不是概率分布（行和须为 1）")
    if grad_a_C.ndim == 1:
        negatives = 1.0 - one_hot(np.array([y]), grad_a_C.shape[0])[0]
    else:
        negatives = 1.0 - one_hot(np.asarray(y), grad_a_C.shape[1])
    return grad_a_C + beta * aux_probs * negatives


# ---------------------------------------------------------------- 训练步

def _mean_norm(g: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(g.reshape(g.shape[0], -1), axis=1)))


def defense_train_step(model: Model, aux: Model, x: np.ndarray, y: np.ndarray, config: GreaceConfig,
                       alpha: float, beta: float, main_optimizer: Optimizer,
                       aux_optimizer: Optimizer) -> DefenseStepReport:
    """
    一步 GREAT + GREACE 联合训练

    两个网络的梯度都在更新前的参数上算出；先更新辅助网络，再更新主网络
    """
    y = np.asarray(y, dtype=np.int64)
    batch = x.shape[0]
    main_params = model.parameters()
    aux_params = aux.parameters()
    partial: Dict = {"alpha": alpha, "beta": beta}
    try:
        with Tape():
            g, logits = training_input_gradient(model, aux, x, y, config.masked, beta,
                                                config.normalize_gradients, create_graph=True)
            partial["masked_grad_norm"] = _mean_norm(g.data)
            aux_input = normalize_per_sample(g) if config.normalize_gradients else g
            aux_ce = softmax_cross_entropy(aux(gradient_reversal(aux_input, alpha)), y)
            partial["aux_loss"] = aux_ce.loss.item()

            main_ce = softmax_cross_entropy(logits, y)
            partial["main_loss"] = main_ce.loss.item()
            upstream = greace_output_gradient(main_ce.grad_probs(), aux_ce.probs, y, beta) / batch
            # 以常量上游梯度构造代理目标，其对 θ 的梯度即 ∇aĈ 的反向传播
            surrogate = reduce_sum(softmax(logits, axis=1) * upstream)

            grads = backward(surrogate + aux_ce.loss, list(main_params.values()) + list(aux_params.values()))
    except NonFiniteError as e:
        logger.error(f"❌ 防御训练步中止: {e}")
        raise StepAborted(str(e), partial) from e

    report = DefenseStepReport(
        main_loss=partial["main_loss"],
        aux_loss=partial["aux_loss"],
        aux_accuracy=float(np.mean(np.argmax(aux_ce.probs, axis=1) == y)),
        masked_grad_norm=partial["masked_grad_norm"],
        alpha=alpha,
        beta=beta,
    )
    if config.probe:
        report.probe_norms = reversed_signal_probe(model, x, y, aux, alpha, config.masked,
                                                   config.normalize_gradients, beta).norms
    if not all(np.isfinite(v) for v in (report.main_loss, report.aux_loss, report.masked_grad_norm)):
        raise StepAborted("损失含非有限值", report.to_dict())

    aux_optimizer.step(named_grads(aux_params, grads))
    main_optimizer.step(named_grads(main_params, grads))
    return report


# ---------------------------------------------------------------- 反向信号探针

@dataclass
class ProbeResult:
    """反向对抗信号：signals[0] 为输入处的 ϱ，其后为每层之后的信号"""
    signals: List[np.ndarray]

    @property
    def norms(self) -> List[float]:
        return [float(np.linalg.norm(s)) for s in self.signals]


def reversed_signal_probe(model: Model, x: np.ndarray, y: np.ndarray, aux: Model, lam: float,
                          masked: bool = True, normalize: bool = False, beta: float = 0.0) -> ProbeResult:
    """
    追踪经梯度反转进入主网络的对抗信号 ϱ 在各层的前向传播

    起点 ϱ = -λ·∇g Ĵ；每经过一个带权重的层取线性化后变号，经过激活层乘以 σ'(z)
    """
    y = np.asarray(y, dtype=np.int64)
    with Tape():
        g = training_input_gradient(model, aux, x, y, masked, beta, normalize, create_graph=False)[0].data
        leaf = Tensor(g, requires_grad=True, name="g")
        aux_input = normalize_per_sample(leaf) if normalize else leaf
        loss = softmax_cross_entropy(aux(aux_input), y).loss
        signal = -lam * backward(loss, [leaf])[leaf].data
    signals = [signal]
    inputs = model.layer_inputs(x)
    for layer, layer_input in zip(model.layers, inputs):
        signal = layer.jvp(layer_input, signal)
        if layer.parameters():
            signal = -signal
        signals.append(signal)
    return ProbeResult(signals)


# ---------------------------------------------------------------- 评估

def gradient_classifier_accuracy(model: Model, aux: Model, x: np.ndarray, y: np.ndarray,
                                 masked: bool = True, normalize: bool = False,
                                 batch_size: int = 128, beta: float = 0.0) -> float:
    """辅助网络在（留出样本的）梯度张量上的分类准确率；梯度张量与训练时同样构造"""
    y = np.asarray(y, dtype=np.int64)
    correct = 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        with Tape():
            g = training_input_gradient(model, aux, xb, yb, masked, beta, normalize, create_graph=False)[0]
        with no_grad():
            aux_input = normalize_per_sample(Tensor(g.data)) if normalize else Tensor(g.data)
            predictions = np.argmax(aux(aux_input).data, axis=1)
        correct += int(np.sum(predictions == yb))
    return correct / max(len(x), 1)
