#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对抗防御测试：掩码梯度、GREACE、联合训练步与反向信号探针
"""

import os

import numpy as np
import pandas as pd
import pytest

from great.core.config_manager import OUTPUT_ROOT_ENV, load_run_config
from great.core.defense import (
    StepAborted, aux_probabilities, defense_train_step, gradient_classifier_accuracy,
    greace_input_gradient_graph, greace_output_gradient, mask_probability_gradient, masked_input_gradient,
    reversed_signal_probe, training_input_gradient,
)
from great.core.models import GreaceConfig
from great.core.net import SGD, build_mlp, supervised_step
from great.core.pipeline_runner import run_pipeline
from great.core.tape import Tape

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _onehot(y, classes):
    return np.eye(classes)[y]


def test_mask_probability_gradient():
    np.testing.assert_array_equal(mask_probability_gradient(np.array([0.3, -2.0, 0.5]), 1), [0.0, -2.0, 0.0])


def test_greace_examples():
    grad = np.array([0.0, -1.0, 0.0])
    probs = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(greace_output_gradient(grad, probs, 1, 2.0), [0.4, -1.0, 0.6])
    np.testing.assert_array_equal(greace_output_gradient(grad, probs, 1, 0.0), grad)
    with pytest.raises(ValueError):
        greace_output_gradient(grad, probs, 1, -1.0)
    with pytest.raises(ValueError):
        greace_output_gradient(grad, np.array([0.5, 0.6, 0.3]), 1, 1.0)


def test_masked_gradient_matches_linear_formula():
    model = build_mlp((3,), [], 2, seed=4)
    W = model.parameters()["0.W"].data
    b = model.parameters()["0.b"].data
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(5, 3))
    y = np.array([0, 1, 1, 0, 1])
    g = masked_input_gradient(model, x, y, create_graph=False).data
    expected = (_softmax(x @ W + b) - _onehot(y, 2)) @ W.T
    np.testing.assert_allclose(g, expected, atol=1e-12)
    unmasked = masked_input_gradient(model, x, y, masked=False, create_graph=False).data
    np.testing.assert_allclose(g, unmasked, atol=1e-12)


def test_defense_step_matches_straight_line_oracle():
    """一步联合训练与手工推导的线性模型更新逐参数一致"""
    rng = np.random.default_rng(11)
    model = build_mlp((2,), [], 2, seed=0)
    aux = build_mlp((2,), [], 2, seed=1)
    x = rng.uniform(size=(4, 2))
    y = np.array([0, 1, 1, 0])
    alpha, beta, lr, B = 0.7, 1.5, 0.1, 4

    W = model.parameters()["0.W"].data.copy()
    b = model.parameters()["0.b"].data.copy()
    V = aux.parameters()["0.W"].data.copy()
    c = aux.parameters()["0.b"].data.copy()
    E = _onehot(y, 2)

    a = _softmax(x @ W + b)
    g = (a - E) @ W.T
    a_aux = _softmax(g @ V + c)
    G = (a_aux - E) @ V.T / B
    H = G @ W
    dz_l = a * (H - np.sum(H * a, axis=1, keepdims=True))
    u = (-E / np.sum(a * E, axis=1, keepdims=True) + beta * a_aux * (1 - E)) / B
    dz_ce = a * (u - np.sum(u * a, axis=1, keepdims=True))
    grad_W = x.T @ dz_ce - alpha * (G.T @ (a - E) + x.T @ dz_l)
    grad_b = dz_ce.sum(axis=0) - alpha * dz_l.sum(axis=0)
    grad_V = g.T @ (a_aux - E) / B
    grad_c = (a_aux - E).sum(axis=0) / B

    report = defense_train_step(model, aux, x, y, GreaceConfig(), alpha, beta,
                                SGD(model.parameters(), lr, momentum=0.0),
                                SGD(aux.parameters(), lr, momentum=0.0))

    np.testing.assert_allclose(model.parameters()["0.W"].data, W - lr * grad_W, atol=1e-10)
    np.testing.assert_allclose(model.parameters()["0.b"].data, b - lr * grad_b, atol=1e-10)
    np.testing.assert_allclose(aux.parameters()["0.W"].data, V - lr * grad_V, atol=1e-10)
    np.testing.assert_allclose(aux.parameters()["0.b"].data, c - lr * grad_c, atol=1e-10)
    assert report.alpha == alpha and report.beta == beta
    assert report.main_loss == pytest.approx(-np.mean(np.log(np.sum(a * E, axis=1))))


def test_zero_schedule_reduces_to_plain_training():
    """α=β=0 时主网络的更新与普通交叉熵一致"""
    rng = np.random.default_rng(3)
    model = build_mlp((3,), [4], 3, seed=2)
    reference = build_mlp((3,), [4], 3, seed=2)
    aux = build_mlp((3,), [4], 3, activation="leaky_relu", seed=3)
    x = rng.uniform(size=(6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    defense_train_step(model, aux, x, y, GreaceConfig(), 0.0, 0.0,
                       SGD(model.parameters(), 0.1, momentum=0.0), SGD(aux.parameters(), 0.1, momentum=0.0))
    supervised_step(reference, x, y, SGD(reference.parameters(), 0.1, momentum=0.0))
    for name, p in model.parameters().items():
        np.testing.assert_allclose(p.data, reference.parameters()[name].data, atol=1e-12)


def test_probe_matches_symbolic_recursion():
    rng = np.random.default_rng(5)
    model = build_mlp((3,), [4], 2, seed=6)
    aux = build_mlp((3,), [], 2, seed=7)
    x = rng.uniform(size=(5, 3))
    y = np.array([0, 1, 0, 1, 1])
    lam = 0.8
    params = model.parameters()
    W1, b1 = params["0.W"].data, params["0.b"].data
    W2, b2 = params["2.W"].data, params["2.b"].data
    Va, ca = aux.parameters()["0.W"].data, aux.parameters()["0.b"].data
    E = _onehot(y, 2)

    z1 = x @ W1 + b1
    mask = (z1 > 0).astype(float)
    a = _softmax(np.maximum(z1, 0) @ W2 + b2)
    g = (((a - E) @ W2.T) * mask) @ W1.T
    rho0 = -lam * (_softmax(g @ Va + ca) - E) @ Va.T / len(y)
    rho1 = -(rho0 @ W1)
    rho2 = rho1 * mask
    rho3 = -(rho2 @ W2)

    result = reversed_signal_probe(model, x, y, aux, lam)
    assert len(result.signals) == 4
    for actual, expected in zip(result.signals, [rho0, rho1, rho2, rho3]):
        np.testing.assert_allclose(actual, expected, atol=1e-8)
    assert result.norms[0] == pytest.approx(np.linalg.norm(rho0))


def test_probe_recorded_in_report():
    rng = np.random.default_rng(8)
    model = build_mlp((3,), [4], 2, seed=0)
    aux = build_mlp((3,), [4], 2, activation="leaky_relu", seed=1)
    x = rng.uniform(size=(4, 3))
    y = np.array([0, 1, 0, 1])
    report = defense_train_step(model, aux, x, y, GreaceConfig(probe=True), 0.5, 1.0,
                                SGD(model.parameters(), 0.01), SGD(aux.parameters(), 0.01))
    assert len(report.probe_norms) == 4
    assert all(np.isfinite(report.probe_norms))


def test_gradient_classifier_accuracy_in_unit_range():
    rng = np.random.default_rng(9)
    model = build_mlp((3,), [4], 3, seed=0)
    aux = build_mlp((3,), [4], 3, activation="leaky_relu", seed=1)
    x = rng.uniform(size=(10, 3))
    y = rng.integers(0, 3, size=10)
    accuracy = gradient_classifier_accuracy(model, aux, x, y, batch_size=4)
    assert 0.0 <= accuracy <= 1.0


def test_unmasked_greace_gradient_matches_linear_formula():
    """不掩码时整段 ∇aĈ 经 softmax 回传：g = [(a-e_y) + β·a⊙(c - <c,a>)]·Wᵀ，c 为负类上的 σ(á)"""
    model = build_mlp((4,), [], 3, seed=2)
    W = model.parameters()["0.W"].data
    b = model.parameters()["0.b"].data
    rng = np.random.default_rng(12)
    x = rng.uniform(size=(6, 4))
    y = np.array([0, 1, 2, 2, 1, 0])
    aux_probs = rng.dirichlet(np.ones(3), size=6)
    beta = 1.5
    a = _softmax(x @ W + b)
    E = _onehot(y, 3)
    c = aux_probs * (1 - E)
    expected = ((a - E) + beta * a * (c - np.sum(c * a, axis=1, keepdims=True))) @ W.T
    with Tape():
        g, _ = greace_input_gradient_graph(model, x, y, aux_probs, beta, create_graph=False)
    np.testing.assert_allclose(g.data, expected, atol=1e-12)

    with Tape():
        plain, _ = greace_input_gradient_graph(model, x, y, aux_probs, 0.0, create_graph=False)
    masked = masked_input_gradient(model, x, y, create_graph=False).data
    np.testing.assert_allclose(plain.data, masked, atol=1e-12)


def test_unmasked_training_gradient_uses_aux_prediction():
    model = build_mlp((4,), [], 3, seed=2)
    aux = build_mlp((4,), [], 3, seed=5)
    W, b = model.parameters()["0.W"].data, model.parameters()["0.b"].data
    V, c = aux.parameters()["0.W"].data, aux.parameters()["0.b"].data
    rng = np.random.default_rng(13)
    x = rng.uniform(size=(5, 4))
    y = np.array([0, 1, 2, 1, 0])
    g_masked = (_softmax(x @ W + b) - _onehot(y, 3)) @ W.T

    hint = aux_probabilities(model, aux, x, y)
    np.testing.assert_allclose(hint, _softmax(g_masked @ V + c), atol=1e-12)
    with Tape():
        g, _ = training_input_gradient(model, aux, x, y, masked=False, beta=1.5, create_graph=False)
    with Tape():
        direct, _ = greace_input_gradient_graph(model, x, y, hint, 1.5, create_graph=False)
    np.testing.assert_array_equal(g.data, direct.data)
    assert np.max(np.abs(g.data - g_masked)) > 1e-6
    with Tape():
        kept, _ = training_input_gradient(model, aux, x, y, masked=True, beta=1.5, create_graph=False)
    np.testing.assert_allclose(kept.data, g_masked, atol=1e-12)


def test_unmasked_defense_step_adds_negative_class_terms():
    """β=0 时掩码与否的训练步一致；β>0 时不掩码的梯度张量带负类项，更新随之不同"""
    rng = np.random.default_rng(14)
    x = rng.uniform(size=(6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])

    def run(masked, beta):
        model = build_mlp((3,), [4], 3, seed=2)
        aux = build_mlp((3,), [4], 3, activation="leaky_relu", seed=3)
        defense_train_step(model, aux, x, y, GreaceConfig(masked=masked), 0.5, beta,
                           SGD(model.parameters(), 0.1, momentum=0.0), SGD(aux.parameters(), 0.1, momentum=0.0))
        params = dict(model.parameters())
        params.update({f"aux.{k}": v for k, v in aux.parameters().items()})
        return {k: v.data.copy() for k, v in params.items()}

    masked, unmasked = run(True, 0.0), run(False, 0.0)
    for name in masked:
        np.testing.assert_allclose(unmasked[name], masked[name], atol=1e-12)
    masked, unmasked = run(True, 1.5), run(False, 1.5)
    assert max(float(np.max(np.abs(unmasked[k] - masked[k]))) for k in masked) > 1e-8


@pytest.mark.slow
def test_defense_beats_baseline_under_fgsm(tmp_path, monkeypatch):
    """桌面规模：ε=0.1 的 FGSM 下防御比基线高 15 个百分点以上，干净准确率损失不超过 5 个百分点，
    辅助网络在留出梯度上接近随机"""
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    results = {name: run_pipeline(load_run_config(os.path.join(CONFIG_DIR, f"{name}.json")))
               for name in ("baseline", "defense")}

    def accuracy(name, epsilon, k=1):
        frame = pd.read_csv(results[name].sweep_path)
        row = frame[np.isclose(frame["epsilon"], epsilon) & (frame["k"] == k)]
        return float(row["accuracy"].iloc[0])

    assert accuracy("defense", 0.1) >= accuracy("baseline", 0.1) + 0.15
    assert accuracy("baseline", 0.0) - accuracy("defense", 0.0) <= 0.05
    assert results["defense"].final_metrics["aux_heldout_accuracy"] < 1.5 / 10


def test_step_aborted_carries_report():
    error = StepAborted("boom", {"main_loss": 1.0})
    assert error.report == {"main_loss": 1.0}
    assert isinstance(error, RuntimeError)
