#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对抗攻击 - FGSM / iFGSM、目标类别选择、鲁棒性扫描与显著图导出
"""

import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from great.core.models import AttackSpec
from great.core.net import Model, Optimizer, named_grads, predict_proba, softmax_cross_entropy
from great.core.tape import Tape, Tensor, backward

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["method", "attack", "mode", "epsilon", "k", "accuracy", "seed"]

LossFn = Callable[[Model, Tensor, np.ndarray], Tensor]


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """普通交叉熵（或给定损失）对输入的梯度，不建图"""
    with Tape():
        leaf = Tensor(x, requires_grad=True, name="x")
        if loss_fn is None:
            loss = softmax_cross_entropy(model(leaf), y).loss
        else:
            loss = loss_fn(model, leaf, y)
        return backward(loss, [leaf])[leaf].data


def _project(candidate: np.ndarray, origin: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """投影回以 origin 为中心的 ε 球，再截断到像素有效范围"""
    eta = np.clip(candidate - origin, -spec.epsilon, spec.epsilon)
    return np.clip(origin + eta, spec.lo, spec.hi)


def _direction(gradient: np.ndarray, targeted: bool) -> np.ndarray:
    # 无目标攻击增大损失，有目标攻击减小对目标类的损失
    return -np.sign(gradient) if targeted else np.sign(gradient)


def fgsm(model: Model, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
         loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """
    单步 FGSM

    Args:
        labels: 无目标攻击时为真实标签，有目标攻击时为目标类别
    """
    if spec.k != 1:
        raise ValueError(f"fgsm 要求 k == 1, 收到 {spec.k}，多步请用 ifgsm")
    x = np.asarray(x, dtype=np.float64)
    gradient = input_gradient(model, x, labels, loss_fn)
    return _project(x + spec.epsilon * _direction(gradient, spec.targeted), x, spec)


def ifgsm(model: Model, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
          loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """k 步、步长 ε/k 的迭代 FGSM，每步后投影"""
    x = np.asarray(x, dtype=np.float64)
    step = spec.epsilon / spec.k
    adversarial = x
    for _ in range(spec.k):
        gradient = input_gradient(model, adversarial, labels, loss_fn)
        adversarial = _project(adversarial + step * _direction(gradient, spec.targeted), x, spec)
    return adversarial


def select_target(probs: np.ndarray, y: int, mode: str, rng: Optional[np.random.Generator] = None) -> int:
    """
    为单个样本选择攻击目标类别

    Args:
        mode: worst 取除 y 外概率最小者（并列取序号小者）；random 在除 y 外均匀抽取
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] < 2:
        raise ValueError(f"select_target 至少需要 2 个类别, 收到形状 {probs.shape}")
    if mode == "worst":
        masked = probs.copy()
        masked[y] = np.inf
        return int(np.argmin(masked))
    if mode == "random":
        if rng is None:
            raise ValueError("random 目标模式需要随机数生成器")
        candidates = [c for c in range(probs.shape[0]) if c != y]
        return int(candidates[rng.integers(0, len(candidates))])
    raise ValueError(f"未知目标选择模式 {mode}")


def select_targets(probs: np.ndarray, labels: np.ndarray, mode: str,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return np.array([select_target(p, int(y), mode, rng) for p, y in zip(probs, labels)], dtype=np.int64)


def attack(model: Model, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """按 spec 的模式生成对抗样本；有目标模式先根据当前预测选目标"""
    labels = np.asarray(y, dtype=np.int64)
    if spec.targeted:
        mode = "worst" if spec.mode == "targeted-worst" else "random"
        labels = select_targets(predict_proba(model, x), labels, mode, rng)
    if spec.k == 1:
        return fgsm(model, x, labels, spec)
    return ifgsm(model, x, labels, spec)


def robustness_sweep(model: Model, x: np.ndarray, y: np.ndarray, epsilons: Sequence[float],
                     specs: Sequence[AttackSpec], method: str = "model", seed: int = 0,
                     batch_size: int = 128) -> pd.DataFrame:
    """
    对每个 (攻击配置, ε) 计算被攻击测试集上的准确率

    Returns:
        列为 method, attack, mode, epsilon, k, accuracy, seed 的表
    """
    y = np.asarray(y, dtype=np.int64)
    rows = []
    for spec in specs:
        for epsilon in epsilons:
            current = AttackSpec(epsilon=float(epsilon), k=spec.k, mode=spec.mode, lo=spec.lo, hi=spec.hi)
            rng = np.random.default_rng(seed)
            correct = 0
            for start in range(0, len(x), batch_size):
                xb, yb = x[start:start + batch_size], y[start:start + batch_size]
                adversarial = xb if current.epsilon == 0 else attack(model, xb, yb, current, rng)
                correct += int(np.sum(np.argmax(predict_proba(model, adversarial), axis=1) == yb))
            accuracy = correct / max(len(x), 1)
            rows.append({
                "method": method, "attack": current.attack, "mode": current.mode,
                "epsilon": current.epsilon, "k": current.k, "accuracy": accuracy, "seed": seed,
            })
            logger.info(f"📊 {method} {current.attack}/{current.mode} ε={current.epsilon}: 准确率 {accuracy:.4f}")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def saliency_map(model: Model, x: np.ndarray, y) -> np.ndarray:
    """|∇x J| 在通道上取最大，线性归一到 [0,255]"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    magnitude = np.abs(input_gradient(model, x, labels))[0].max(axis=0)
    peak = magnitude.max()
    if peak <= 0:
        return np.zeros(magnitude.shape, dtype=np.uint8)
    return np.rint(magnitude / peak * 255.0).astype(np.uint8)


def saliency_export(model: Model, x: np.ndarray, y, path: str) -> np.ndarray:
    """把显著图写成二进制 PGM (P5)"""
    image = saliency_map(model, x, y)
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(image.tobytes())
    return image


def adversarial_training_step(model: Model, x: np.ndarray, y: np.ndarray, optimizer: Optimizer,
                              epsilon: float = 0.2) -> Tuple[float, float]:
    """对抗训练基线：0.5·(干净样本损失 + FGSM 样本损失)"""
    adversarial = fgsm(model, x, y, AttackSpec(epsilon=epsilon))
    params = model.parameters()
    with Tape():
        clean = softmax_cross_entropy(model(Tensor(x)), y)
        adv = softmax_cross_entropy(model(Tensor(adversarial)), y)
        loss = 0.5 * (clean.loss + adv.loss)
        grads = backward(loss, list(params.values()))
    optimizer.step(named_grads(params, grads))
    accuracy = float(np.mean(np.argmax(clean.probs, axis=1) == clean.labels))
    return loss.item(), accuracy
