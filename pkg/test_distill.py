#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
梯度对抗蒸馏测试
"""

import json
import os

import numpy as np
import pytest

from great.core.config_manager import OUTPUT_ROOT_ENV, build_run_config
from great.core.distill import (
    build_discriminator, discriminator_accuracy, discriminator_loss, distill_train_step,
    heldout_discriminator_accuracy, soft_target_baseline_step, soft_target_loss, standardize_per_sample,
    student_gradient, teacher_gradient,
)
from great.core.models import DistillConfig
from great.core.net import SGD, Adam, build_mlp, supervised_step
from great.core.pipeline_runner import run_pipeline
from great.core.tape import Tensor, no_grad

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


@pytest.fixture
def setup():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 5))
    y = rng.integers(0, 3, size=8)
    teacher = build_mlp((5,), [12], 3, seed=100)
    student = build_mlp((5,), [6], 3, seed=0)
    discriminator = build_discriminator(student.descriptor, seed=7)
    return x, y, teacher, student, discriminator


def test_discriminator_loss_values():
    assert discriminator_loss(np.array([0.5]), np.array([0.5])).item() == pytest.approx(2 * np.log(0.5))
    # 完美判别器的 D 接近 0，概率截断后仍有限
    perfect = discriminator_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0])).item()
    assert np.isfinite(perfect) and perfect == pytest.approx(0.0, abs=1e-9)
    worst = discriminator_loss(np.array([0.0]), np.array([1.0])).item()
    assert np.isfinite(worst) and worst < -50


def test_build_discriminator_halves_depth():
    discriminator = build_discriminator({"builder": "mlp", "input_shape": [5], "hidden": [16, 8]})
    assert discriminator.descriptor["hidden"] == [16]
    assert discriminator.descriptor["outputs"] == 2
    assert set(discriminator.activation_kinds()) == {"leaky_relu"}

    conv = build_discriminator({"builder": "resnet_small", "input_shape": [1, 8, 8], "width": 4, "blocks": 4})
    assert conv.descriptor["blocks"] == 2
    assert set(conv.activation_kinds()) == {"leaky_relu"}


def test_standardize_per_sample():
    rng = np.random.default_rng(1)
    with no_grad():
        out = standardize_per_sample(Tensor(rng.normal(3.0, 2.0, size=(4, 10)))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-6)


def test_soft_target_loss():
    logits = np.array([[1.0, 2.0, 0.5]])
    assert soft_target_loss(Tensor(logits), logits, 4.0).item() == pytest.approx(0.0, abs=1e-12)
    assert soft_target_loss(Tensor(logits), logits[:, ::-1].copy(), 4.0).item() > 0
    with pytest.raises(ValueError):
        soft_target_loss(Tensor(logits), logits, 0.0)


def test_zero_alpha_matches_supervised_trajectory(setup):
    """α=0 时学生的更新轨迹与普通监督训练一致"""
    x, y, teacher, student, discriminator = setup
    reference = build_mlp((5,), [6], 3, seed=0)
    config = DistillConfig(alpha=0.0)
    student_opt = SGD(student.parameters(), 0.1, momentum=0.0)
    reference_opt = SGD(reference.parameters(), 0.1, momentum=0.0)
    disc_opt = Adam(discriminator.parameters(), 0.01)
    for _ in range(25):
        distill_train_step(student, teacher, discriminator, x, y, config, student_opt, disc_opt)
        supervised_step(reference, x, y, reference_opt)
    for name, p in student.parameters().items():
        np.testing.assert_allclose(p.data, reference.parameters()[name].data, atol=1e-10)


def test_distill_step_report(setup):
    x, y, teacher, student, discriminator = setup
    before = discriminator.checksum()
    report = distill_train_step(student, teacher, discriminator, x, y, DistillConfig(alpha=0.5),
                                Adam(student.parameters(), 0.01), Adam(discriminator.parameters(), 0.01))
    assert report.d_value <= 0.0
    assert report.disc_loss == pytest.approx(-report.d_value)
    assert 0.0 <= report.disc_accuracy <= 1.0
    assert discriminator.checksum() != before


def test_teacher_is_never_updated(setup):
    x, y, teacher, student, discriminator = setup
    before = teacher.checksum()
    distill_train_step(student, teacher, discriminator, x, y, DistillConfig(alpha=0.3),
                       Adam(student.parameters(), 0.01), Adam(discriminator.parameters(), 0.01))
    soft_target_baseline_step(student, teacher, x, y, 20.0, 0.1, Adam(student.parameters(), 0.01))
    assert teacher.checksum() == before


def test_discriminator_accuracy_in_unit_range(setup):
    x, y, teacher, student, discriminator = setup
    g_teacher = teacher_gradient(teacher, x, y)
    accuracy = discriminator_accuracy(discriminator, g_teacher, g_teacher * 0.5, standardize=True)
    assert 0.0 <= accuracy <= 1.0
    heldout = heldout_discriminator_accuracy(student, teacher, discriminator, x, y, batch_size=3)
    assert 0.0 <= heldout <= 1.0


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ValueError):
        DistillConfig(method="magic")


# ---------------------------------------------------------------- 线性模型上的逐步核对

def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _numeric_grad(objective, array, h=1e-6):
    """对 array 原地扰动的中心差分"""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        up = objective()
        array[index] = original - h
        down = objective()
        array[index] = original
        grad[index] = (up - down) / (2 * h)
    return grad


def test_distill_step_matches_finite_difference_oracle():
    """线性学生与线性判别器：一步更新等于 (1-α)CE + α·E log(1-f(g_s)) 与 -D 的差分梯度"""
    rng = np.random.default_rng(21)
    x = rng.uniform(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    teacher = build_mlp((4,), [8], 3, seed=100)
    student = build_mlp((4,), [], 3, seed=1)
    discriminator = build_discriminator(student.descriptor, seed=2)
    assert discriminator.descriptor["hidden"] == []
    alpha, lr = 0.3, 0.1
    E = np.eye(3)[y]

    W, b = student.parameters()["0.W"].data.copy(), student.parameters()["0.b"].data.copy()
    V, c = discriminator.parameters()["0.W"].data.copy(), discriminator.parameters()["0.b"].data.copy()
    g_teacher = teacher_gradient(teacher, x, y)

    def student_gradients():
        a = _softmax(x @ W + b)
        return (a - E) @ W.T

    def student_objective():
        a = _softmax(x @ W + b)
        p_s = _softmax(student_gradients() @ V + c)[:, 1]
        ce = -np.mean(np.log(np.sum(a * E, axis=1)))
        return (1 - alpha) * ce + alpha * np.mean(np.log(1 - p_s))

    def disc_objective():
        p_t = _softmax(g_teacher @ V + c)[:, 1]
        p_s = _softmax(student_gradients() @ V + c)[:, 1]
        return -(np.mean(np.log(p_t)) + np.mean(np.log(1 - p_s)))

    expected = {
        "W": W - lr * _numeric_grad(student_objective, W),
        "b": b - lr * _numeric_grad(student_objective, b),
        "V": V - lr * _numeric_grad(disc_objective, V),
        "c": c - lr * _numeric_grad(disc_objective, c),
    }
    distill_train_step(student, teacher, discriminator, x, y, DistillConfig(alpha=alpha),
                       SGD(student.parameters(), lr, momentum=0.0), SGD(discriminator.parameters(), lr, momentum=0.0))
    np.testing.assert_allclose(student.parameters()["0.W"].data, expected["W"], atol=1e-7)
    np.testing.assert_allclose(student.parameters()["0.b"].data, expected["b"], atol=1e-7)
    np.testing.assert_allclose(discriminator.parameters()["0.W"].data, expected["V"], atol=1e-7)
    np.testing.assert_allclose(discriminator.parameters()["0.b"].data, expected["c"], atol=1e-7)


def test_teacher_gradient_matches_finite_difference(setup):
    x, y, teacher, _, _ = setup
    E = np.eye(3)[y]
    g = teacher_gradient(teacher, x, y)

    perturbed = x.copy()

    def summed_ce():
        with no_grad():
            logits = teacher(Tensor(perturbed)).data
        return -np.sum(np.log(np.sum(_softmax(logits) * E, axis=1)))

    np.testing.assert_allclose(g, _numeric_grad(summed_ce, perturbed), atol=1e-4)


def test_identical_gradients_give_chance_accuracy(setup):
    x, y, _, student, discriminator = setup
    g = student_gradient(student, x, y)
    assert discriminator_accuracy(discriminator, g, g) == 0.5
    assert heldout_discriminator_accuracy(student, student, discriminator, x, y, batch_size=3) == 0.5


def test_discriminator_separates_untrained_student():
    """教师梯度与学生梯度分落两条正交射线时，判别器能在留出样本上把二者分开"""
    rng = np.random.default_rng(31)
    student = build_mlp((5,), [], 2, seed=4)
    Ws = student.parameters()["0.W"].data
    v = Ws[:, 1] - Ws[:, 0]
    r = rng.normal(size=5)
    u = r - (r @ v) / (v @ v) * v
    u *= np.linalg.norm(v) / np.linalg.norm(u)
    teacher = build_mlp((5,), [], 2, seed=5)
    teacher.parameters()["0.W"].data = np.stack([np.zeros(5), u], axis=1)
    teacher.parameters()["0.b"].data = np.zeros(2)

    discriminator = build_discriminator(student.descriptor, seed=6)
    x = rng.uniform(size=(64, 5))
    y = np.zeros(64, dtype=np.int64)
    frozen = SGD(student.parameters(), 0.0, momentum=0.0)
    disc_opt = Adam(discriminator.parameters(), 0.05)
    before = student.checksum()
    for _ in range(200):
        distill_train_step(student, teacher, discriminator, x, y, DistillConfig(alpha=0.1), frozen, disc_opt)
    assert student.checksum() == before
    x_heldout = rng.uniform(size=(128, 5))
    y_heldout = np.zeros(128, dtype=np.int64)
    assert heldout_discriminator_accuracy(student, teacher, discriminator, x_heldout, y_heldout) >= 0.95


def test_student_update_ignores_teacher_gradient_values():
    """判别器的教师支路不向学生回传：换教师只改变判别器的更新"""
    rng = np.random.default_rng(41)
    x = rng.uniform(size=(8, 5))
    y = rng.integers(0, 3, size=8)

    def step_with(teacher_seed):
        student = build_mlp((5,), [6], 3, seed=0)
        discriminator = build_discriminator(student.descriptor, seed=7)
        distill_train_step(student, build_mlp((5,), [12], 3, seed=teacher_seed), discriminator, x, y,
                           DistillConfig(alpha=0.4), SGD(student.parameters(), 0.1, momentum=0.0),
                           SGD(discriminator.parameters(), 0.1, momentum=0.0))
        return student, discriminator

    first_student, first_disc = step_with(100)
    second_student, second_disc = step_with(200)
    for name, p in first_student.parameters().items():
        np.testing.assert_array_equal(p.data, second_student.parameters()[name].data)
    assert first_disc.checksum() != second_disc.checksum()


@pytest.mark.slow
def test_sparse_great_student_matches_supervised(tmp_path, monkeypatch):
    """5% 数据下 GREAT 学生不差于纯监督学生（3 个种子取中位数），且留出判别准确率落在 [0.4, 0.6]"""
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    with open(os.path.join(CONFIG_DIR, "distill_sparse.json"), encoding="utf-8") as f:
        base = json.load(f)
    finals = {"great": [], "supervised": []}
    disc = []
    for method in finals:
        for seed in range(3):
            data = json.loads(json.dumps(base))
            data.update(seed=seed, method=f"sparse_{method}", output_dir=f"{method}_{seed}")
            data["distill"]["method"] = method
            metrics = run_pipeline(build_run_config(data)).final_metrics
            finals[method].append(metrics["test_accuracy"])
            if method == "great":
                disc.append(metrics["disc_heldout_accuracy"])
    assert np.median(finals["great"]) >= np.median(finals["supervised"])
    assert 0.4 <= np.median(disc) <= 0.6
