#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
自检套件 - 一阶/二阶有限差分与各模块的精确代数不变量
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from great.core.attacks import attack, fgsm, ifgsm
from great.core.defense import greace_output_gradient, masked_input_gradient
from great.core.models import AttackSpec
from great.core.multitask import (
    GalBank, TaskSet, TaskSpec, gal_scaled_encoder_update, task_feature_gradients,
)
from great.core.net import build_mlp, build_two_task_model
from great.core.tape import (
    Tape, Tensor, backward, exp, finite_difference_check, gradient_reversal, leaky_relu, log_softmax,
    matmul, reduce_sum, softmax,
)

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool

    def to_dict(self) -> Dict:
        return asdict(self)


def _result(suite: str, name: str, value: float, threshold: float) -> CheckResult:
    return CheckResult(suite, name, float(value), float(threshold), bool(value <= threshold))


# ---------------------------------------------------------------- 随机计算图

def random_graph(rng: np.random.Generator, max_depth: int = 5, max_width: int = 16,
                 smooth: bool = False) -> Callable[[Tensor], Tensor]:
    """随机多层映射 x -> 标量；smooth 时只用处处光滑的算子"""
    depth = int(rng.integers(1, max_depth + 1))
    widths = [int(rng.integers(2, max_width + 1)) for _ in range(depth + 1)]
    weights = [rng.normal(size=(widths[i], widths[i + 1])) / np.sqrt(widths[i]) for i in range(depth)]
    biases = [0.1 * rng.normal(size=widths[i + 1]) for i in range(depth)]
    kinds = ["leaky_relu", "softmax", "square"] if not smooth else ["softmax", "square", "exp"]
    acts = [kinds[int(rng.integers(len(kinds)))] for _ in range(depth)]
    readout = rng.normal(size=widths[-1])

    def f(x: Tensor) -> Tensor:
        h = x
        for W, b, act in zip(weights, biases, acts):
            h = matmul(h, W) + b
            if act == "leaky_relu":
                h = leaky_relu(h, 0.2)
            elif act == "softmax":
                h = softmax(h, axis=-1)
            elif act == "exp":
                h = exp(-0.5 * h * h)
            else:
                h = 0.5 * h * h
        return reduce_sum(log_softmax(h, axis=-1) * readout)

    f.input_width = widths[0]
    return f


def first_order_suite(count: int = 100, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        f = random_graph(rng)
        x = rng.normal(size=(2, f.input_width))
        worst = max(worst, finite_difference_check(f, x, 1e-5))
    return [_result("first_order", f"{count} 个随机计算图", worst, 1e-4)]


def hessian_vector(f: Callable[[Tensor], Tensor], x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """对梯度再求一次导：∇(∇f·v)"""
    with Tape():
        leaf = Tensor(x, requires_grad=True)
        g = backward(f(leaf), [leaf], create_graph=True)[leaf]
        return backward(reduce_sum(g * v), [leaf])[leaf].data


def first_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    with Tape():
        leaf = Tensor(x, requires_grad=True)
        return backward(f(leaf), [leaf])[leaf].data


def second_order_suite(count: int = 50, seed: int = 1, h: float = 1e-5) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        f = random_graph(rng, smooth=True)
        x = rng.normal(size=(2, f.input_width))
        v = rng.normal(size=x.shape)
        hv = hessian_vector(f, x, v)
        fd = (first_gradient(f, x + h * v) - first_gradient(f, x - h * v)) / (2.0 * h)
        worst = max(worst, float(np.max(np.abs(hv - fd) / np.maximum(np.abs(fd), 1e-6))))

    x = np.array([0.5, -1.25, 2.0])
    cube = hessian_vector(lambda t: reduce_sum(t * t * t), x, np.ones_like(x))
    return [
        _result("second_order", f"{count} 个光滑随机计算图", worst, 1e-3),
        _result("second_order", "x³ 的二阶导等于 6x", float(np.max(np.abs(cube - 6.0 * x))), 1e-9),
    ]


# ---------------------------------------------------------------- 代数不变量

def invariant_suite(seed: int = 2, attacks: int = 1000) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    # 梯度反转
    x = rng.normal(size=(4, 3))
    upstream = rng.normal(size=(4, 3))
    with Tape():
        leaf = Tensor(x, requires_grad=True)
        out = gradient_reversal(leaf, 0.5)
        forward_diff = float(np.max(np.abs(out.data - x)))
        reversed_grad = backward(reduce_sum(out * upstream), [leaf])[leaf].data
    with Tape():
        leaf = Tensor(x, requires_grad=True)
        twice = gradient_reversal(gradient_reversal(leaf, 1.0), 1.0)
        restored = backward(reduce_sum(twice * upstream), [leaf])[leaf].data
    results.append(_result("invariants", "梯度反转前向恒等", forward_diff, 0.0))
    results.append(_result("invariants", "梯度反转反向为 -λu",
                           float(np.max(np.abs(reversed_grad + 0.5 * upstream))), 0.0))
    results.append(_result("invariants", "两次反转恢复原信号",
                           float(np.max(np.abs(restored - upstream))), 0.0))

    # GREACE β=0
    grad = rng.normal(size=(5, 4))
    probs = rng.dirichlet(np.ones(4), size=5)
    labels = rng.integers(0, 4, size=5)
    results.append(_result("invariants", "GREACE β=0 退化为交叉熵梯度",
                           float(np.max(np.abs(greace_output_gradient(grad, probs, labels, 0.0) - grad))),
                           1e-12))

    # 掩码梯度与交叉熵梯度一致
    model = build_mlp((6,), [8], 3, seed=seed)
    x = rng.uniform(size=(5, 6))
    y = rng.integers(0, 3, size=5)
    masked = masked_input_gradient(model, x, y, masked=True, create_graph=False).data
    plain = masked_input_gradient(model, x, y, masked=False, create_graph=False).data
    results.append(_result("invariants", "掩码梯度等于交叉熵输入梯度",
                           float(np.max(np.abs(masked - plain))), 1e-12))

    # GAL 只进入编码器的上游梯度：前向、损失与特征梯度不受 γ 影响，编码器梯度对 γ 线性
    two_task = build_two_task_model(4, 6, seed=seed)
    task_set = TaskSet([TaskSpec("task_1"), TaskSpec("task_2")])
    gals = GalBank(task_set.names, two_task.feature_shape)
    x = rng.normal(size=(3, 4))
    targets = {"task_1": rng.normal(size=(3, 2)), "task_2": 100.0 * rng.normal(size=(3, 2))}

    def gal_pass(gamma_values):
        for name, gamma in gals.parameters().items():
            gamma.data = np.array(gamma_values[name], dtype=np.float64)
        with Tape():
            result = task_feature_gradients(two_task, x, targets, task_set)
            grads = gal_scaled_encoder_update(two_task.encoder, result.feature, result.gradients, gals, None)
        return result, grads

    ones = {name: np.ones(two_task.feature_shape) for name in task_set.names}
    spread = {name: rng.uniform(0.1, 3.0, size=two_task.feature_shape) for name in task_set.names}
    base, base_grads = gal_pass(ones)
    scaled, scaled_grads = gal_pass(spread)
    forward_diff = max(
        float(np.max(np.abs(base.feature.data - scaled.feature.data))),
        max(abs(base.raw_losses[k] - scaled.raw_losses[k]) for k in task_set.names),
        max(float(np.max(np.abs(base.gradients[k].data - scaled.gradients[k].data))) for k in task_set.names),
    )
    results.append(_result("invariants", "GAL 不改变前向、损失与特征梯度", forward_diff, 0.0))
    # 逐任务单独置 γ 后叠加，应与同时使用 spread 的编码器梯度一致
    partial_sum = None
    for name in task_set.names:
        only = {k: (spread[k] if k == name else np.full(two_task.feature_shape, gals.floor)) for k in ones}
        _, grads = gal_pass(only)
        partial_sum = grads if partial_sum is None else {k: partial_sum[k] + grads[k] for k in grads}
    _, floor_grads = gal_pass({k: np.full(two_task.feature_shape, gals.floor) for k in ones})
    linear_diff = max(
        float(np.max(np.abs(partial_sum[k] - floor_grads[k] - scaled_grads[k]))) for k in scaled_grads
    )
    moved = max(float(np.max(np.abs(scaled_grads[k] - base_grads[k]))) for k in base_grads)
    results.append(_result("invariants", "编码器梯度按 Σ g_i·γ_i 线性依赖 γ", linear_diff, 1e-9))
    results.append(_result("invariants", "γ 改变编码器梯度", 1.0 / (1.0 + moved * 1e6), 0.5))

    # 攻击
    model = build_mlp((8,), [16], 4, seed=seed)
    x = rng.uniform(size=(16, 8))
    y = rng.integers(0, 4, size=16)
    spec = AttackSpec(epsilon=0.1, k=1)
    results.append(_result("invariants", "k=1 的 iFGSM 与 FGSM 一致",
                           float(np.max(np.abs(ifgsm(model, x, y, spec) - fgsm(model, x, y, spec)))), 0.0))
    worst = 0.0
    modes = ("non-targeted", "targeted-worst", "targeted-random")
    for trial in range(-(-attacks // len(x))):
        current = AttackSpec(epsilon=float(rng.uniform(0.0, 0.3)), k=int(rng.integers(1, 5)),
                             mode=modes[trial % len(modes)])
        xb = rng.uniform(size=x.shape)
        adversarial = attack(model, xb, y, current, rng)
        worst = max(worst, float(np.max(np.abs(adversarial - xb))) - current.epsilon)
    results.append(_result("invariants", f"{attacks} 次随机攻击的 ‖x'-x‖∞ ≤ ε", max(worst, 0.0), 1e-12))
    return results


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "first_order": first_order_suite,
    "second_order": second_order_suite,
    "invariants": invariant_suite,
}


def run_selftest(suites: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """运行指定（缺省为全部）自检套件"""
    names = list(suites or SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"未知自检套件: {unknown}, 可选 {list(SUITES)}")
    results = []
    for name in names:
        logger.info(f"🚀 自检套件 {name}")
        for result in SUITES[name]():
            marker = "✅" if result.passed else "❌"
            logger.info(f"{marker} {result.name}: {result.value:.3e} (阈值 {result.threshold:.0e})")
            results.append(result)
    return results
