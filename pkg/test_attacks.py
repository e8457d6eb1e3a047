#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对抗攻击测试
"""

import numpy as np
import pytest

from great.core.attacks import (
    SWEEP_COLUMNS, adversarial_training_step, attack, fgsm, ifgsm, robustness_sweep, saliency_export,
    select_target,
)
from great.core.models import AttackSpec
from great.core.net import SGD, build_mlp, evaluate_accuracy


@pytest.fixture
def model():
    return build_mlp((6,), [8], 3, seed=0)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(12, 6)), rng.integers(0, 3, size=12)


def test_attack_spec_validation():
    assert AttackSpec(epsilon=0.1, k=1).attack == "fgsm"
    assert AttackSpec(epsilon=0.1, k=10).attack == "ifgsm"
    with pytest.raises(ValueError):
        AttackSpec(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackSpec(k=0)
    with pytest.raises(ValueError):
        AttackSpec(mode="sideways")


def test_fgsm_requires_single_step(model, batch):
    x, y = batch
    with pytest.raises(ValueError):
        fgsm(model, x, y, AttackSpec(epsilon=0.1, k=3))


def test_ifgsm_single_step_equals_fgsm(model, batch):
    x, y = batch
    spec = AttackSpec(epsilon=0.1, k=1)
    np.testing.assert_array_equal(ifgsm(model, x, y, spec), fgsm(model, x, y, spec))


def test_zero_epsilon_is_identity(model, batch):
    x, y = batch
    np.testing.assert_array_equal(fgsm(model, x, y, AttackSpec(epsilon=0.0)), x)


def test_perturbation_stays_in_ball_and_range(model):
    rng = np.random.default_rng(1)
    for trial in range(30):
        x = rng.uniform(size=(8, 6))
        y = rng.integers(0, 3, size=8)
        spec = AttackSpec(epsilon=float(rng.uniform(0, 0.5)), k=int(rng.integers(1, 6)),
                          mode=("non-targeted", "targeted-worst", "targeted-random")[trial % 3])
        adversarial = attack(model, x, y, spec, rng)
        assert np.max(np.abs(adversarial - x)) <= spec.epsilon + 1e-12
        assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0


def test_select_target():
    assert select_target(np.array([0.1, 0.6, 0.3]), 1, "worst") == 0
    assert select_target(np.array([0.2, 0.6, 0.2]), 1, "worst") == 0
    rng = np.random.default_rng(0)
    picks = {select_target(np.array([0.3, 0.3, 0.4]), 2, "random", rng) for _ in range(50)}
    assert picks == {0, 1}
    with pytest.raises(ValueError):
        select_target(np.array([1.0]), 0, "worst")


def test_non_targeted_attack_increases_loss(model, batch):
    x, y = batch
    from great.core.tape import Tensor, no_grad
    from great.core.net import softmax_cross_entropy

    adversarial = fgsm(model, x, y, AttackSpec(epsilon=0.05, lo=-10.0, hi=10.0))
    with no_grad():
        clean = softmax_cross_entropy(model(Tensor(x)), y).loss.item()
        attacked = softmax_cross_entropy(model(Tensor(adversarial)), y).loss.item()
    assert attacked > clean


def test_robustness_sweep_schema(model, batch):
    x, y = batch
    specs = [AttackSpec(k=1), AttackSpec(k=3, mode="targeted-worst")]
    frame = robustness_sweep(model, x, y, [0.0, 0.1], specs, method="baseline", seed=4)
    assert list(frame.columns) == SWEEP_COLUMNS
    assert len(frame) == 4
    clean = evaluate_accuracy(model, x, y)
    assert (frame[frame["epsilon"] == 0.0]["accuracy"] == clean).all()
    assert set(frame["attack"]) == {"fgsm", "ifgsm"}


def test_saliency_export_writes_pgm(tmp_path):
    model = build_mlp((1, 4, 5), [6], 2, seed=1)
    x = np.random.default_rng(2).uniform(size=(1, 4, 5))
    path = tmp_path / "saliency.pgm"
    image = saliency_export(model, x, 1, str(path))
    data = path.read_bytes()
    assert data.startswith(b"P5\n5 4\n255\n")
    assert len(data) == len(b"P5\n5 4\n255\n") + 20
    assert image.shape == (4, 5) and image.max() == 255


def test_adversarial_training_step_updates_model(model, batch):
    x, y = batch
    before = model.checksum()
    loss, accuracy = adversarial_training_step(model, x, y, SGD(model.parameters(), 0.1), epsilon=0.2)
    assert np.isfinite(loss) and 0.0 <= accuracy <= 1.0
    assert model.checksum() != before


def _two_class_linear(seed=3):
    return build_mlp((5,), [], 2, seed=seed)


def test_ifgsm_on_linear_model_equals_fgsm():
    """二分类线性模型的输入梯度符号与 x 无关，k 步 ε/k 的累加等于一步 ε"""
    model = _two_class_linear()
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(9, 5))
    y = rng.integers(0, 2, size=9)
    one = fgsm(model, x, y, AttackSpec(epsilon=0.3, k=1, lo=-10.0, hi=10.0))
    many = ifgsm(model, x, y, AttackSpec(epsilon=0.3, k=10, lo=-10.0, hi=10.0))
    np.testing.assert_allclose(many, one, rtol=0, atol=1e-12)


def test_targeted_direction_is_negated():
    model = _two_class_linear(5)
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(7, 5))
    target = rng.integers(0, 2, size=7)
    toward = fgsm(model, x, target, AttackSpec(epsilon=0.2, mode="targeted-worst", lo=-10.0, hi=10.0))
    away = fgsm(model, x, target, AttackSpec(epsilon=0.2, mode="non-targeted", lo=-10.0, hi=10.0))
    np.testing.assert_allclose(toward - x, -(away - x), atol=1e-15)
    assert np.all(np.abs(toward - x) > 0)


@pytest.mark.parametrize("spec", [
    AttackSpec(epsilon=0.1, k=1),
    AttackSpec(epsilon=0.1, k=5),
    AttackSpec(epsilon=0.1, k=3, mode="targeted-random"),
])
def test_attacks_leave_parameters_untouched(model, batch, spec):
    x, y = batch
    before = model.checksum()
    attack(model, x, y, spec, np.random.default_rng(0))
    robustness_sweep(model, x, y, [0.0, spec.epsilon], [spec], method="m", seed=1)
    assert model.checksum() == before
