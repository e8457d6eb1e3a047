#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
网络组件 - 层、模型、损失函数、优化器与小型残差网络
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from great.core.tape import (
    DTYPE, ShapeError, Tape, Tensor, absolute, backward, conv2d, leaky_relu,
    log, log_softmax, no_grad, one_hot, reduce_mean, reduce_sum, relu, reshape,
    softmax, sqrt,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"GRCKPT01"


# ---------------------------------------------------------------- 层

class Layer:
    """层基类"""

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict()

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return shape

    def jvp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """在输入 x 处对切向量 v 做线性化前推"""
        raise NotImplementedError

    def activation_kinds(self) -> List[str]:
        return []


def _he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Dense(Layer):
    """全连接层 z = x W + b"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.W = Tensor(_he_uniform(rng, (in_features, out_features), in_features), requires_grad=True, name="W")
        self.b = Tensor(np.zeros(out_features), requires_grad=True, name="b")

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense: 输入 {x.shape} 与权重 {self.W.shape} 不兼容")
        return x @ self.W + self.b

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict([("W", self.W), ("b", self.b)])

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ShapeError(f"dense: 期望输入 ({self.in_features},), 收到 {shape}")
        return (self.out_features,)

    def jvp(self, x, v):
        return v @ self.W.data


class Conv2d(Layer):
    """3x3 卷积层"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        fan_in = in_channels * 9
        self.W = Tensor(_he_uniform(rng, (out_channels, in_channels, 3, 3), fan_in), requires_grad=True, name="W")
        self.b = Tensor(np.zeros(out_channels), requires_grad=True, name="b")

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.W, self.b, self.stride)

    def parameters(self):
        return OrderedDict([("W", self.W), ("b", self.b)])

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"conv2d: 期望 {self.in_channels} 个输入通道, 收到 {shape}")
        c, h, w = shape
        return (self.out_channels, (h - 1) // self.stride + 1, (w - 1) // self.stride + 1)

    def jvp(self, x, v):
        with no_grad():
            return conv2d(Tensor(v), self.W, None, self.stride).data


class Activation(Layer):
    """relu 或 leaky_relu"""

    def __init__(self, kind: str = "relu", slope: float = 0.2):
        if kind not in ("relu", "leaky_relu"):
            raise ValueError(f"未知激活函数 {kind}")
        self.kind = kind
        self.slope = slope

    def forward(self, x):
        return relu(x) if self.kind == "relu" else leaky_relu(x, self.slope)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return (x > 0).astype(DTYPE)
        return np.where(x > 0, 1.0, self.slope)

    def jvp(self, x, v):
        return v * self.derivative(x)

    def activation_kinds(self):
        return [self.kind]


class ResidualBlock(Layer):
    """残差块: out = conv2(act(conv1(x))) + shortcut(x)，不含批归一化"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 stride: int = 1, activation: str = "relu", slope: float = 0.2):
        self.conv1 = Conv2d(in_channels, out_channels, rng, stride)
        self.act = Activation(activation, slope)
        self.conv2 = Conv2d(out_channels, out_channels, rng, 1)
        self.shortcut = None
        if in_channels != out_channels or stride != 1:
            self.shortcut = Conv2d(in_channels, out_channels, rng, stride)

    def forward(self, x):
        residual = self.conv2(self.act(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return residual + skip

    def parameters(self):
        params = OrderedDict()
        for prefix, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("shortcut", self.shortcut)):
            if layer is None:
                continue
            for name, tensor in layer.parameters().items():
                params[f"{prefix}.{name}"] = tensor
        return params

    def output_shape(self, shape):
        out = self.conv2.output_shape(self.conv1.output_shape(shape))
        if self.shortcut is not None:
            self.shortcut.output_shape(shape)
        return out

    def jvp(self, x, v):
        with no_grad():
            z1 = self.conv1(Tensor(x)).data
        inner = self.conv2.jvp(None, self.act.jvp(z1, self.conv1.jvp(x, v)))
        return inner + (v if self.shortcut is None else self.shortcut.jvp(x, v))

    def activation_kinds(self):
        return self.act.activation_kinds()


class GlobalAvgPool(Layer):
    """全局平均池化 (N,C,H,W) -> (N,C)"""

    def forward(self, x):
        return reduce_mean(x, axis=(2, 3))

    def output_shape(self, shape):
        return (shape[0],)

    def jvp(self, x, v):
        return v.mean(axis=(2, 3))


class Flatten(Layer):

    def forward(self, x):
        return reshape(x, (x.shape[0], -1))

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def jvp(self, x, v):
        return v.reshape(v.shape[0], -1)


# ---------------------------------------------------------------- 模型

class Model:
    """顺序模型，参数名全局唯一"""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], descriptor: Optional[Dict] = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.descriptor = descriptor or {}
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self._params = OrderedDict()
        for index, layer in enumerate(self.layers):
            for name, tensor in layer.parameters().items():
                full = f"{index}.{name}"
                if full in self._params:
                    raise ValueError(f"参数名重复: {full}")
                tensor.name = full
                self._params[full] = tensor

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> Dict[str, Tensor]:
        return self._params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def activation_kinds(self) -> List[str]:
        kinds = []
        for layer in self.layers:
            kinds.extend(layer.activation_kinds())
        return kinds

    def layer_inputs(self, x: np.ndarray) -> List[np.ndarray]:
        """无梯度前向，返回每层的输入"""
        inputs = []
        with no_grad():
            current = Tensor(x)
            for layer in self.layers:
                inputs.append(current.data)
                current = layer(current)
        return inputs

    def jvp_trace(self, x: np.ndarray, v: np.ndarray) -> List[np.ndarray]:
        """把切向量 v 逐层前推，返回每层之后的信号"""
        signals = []
        for layer, layer_input in zip(self.layers, self.layer_inputs(x)):
            v = layer.jvp(layer_input, v)
            signals.append(v)
        return signals

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise KeyError(f"缺少参数 {name}")
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ShapeError(f"参数 {name} 形状不匹配: {value.shape} vs {p.shape}")
            p.data = value.copy()

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self._params.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


class MultiHeadModel:
    """共享编码器 + 多个任务解码器"""

    def __init__(self, encoder: Model, decoders: Dict[str, Model]):
        for name, decoder in decoders.items():
            if decoder.input_shape != encoder.output_shape:
                raise ShapeError(f"解码器 {name} 输入 {decoder.input_shape} 与编码器输出 {encoder.output_shape} 不一致")
        self.encoder = encoder
        self.decoders = OrderedDict(decoders)

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return self.encoder.output_shape

    def forward(self, x: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        feature = self.encoder(x)
        return feature, OrderedDict((name, decoder(feature)) for name, decoder in self.decoders.items())

    def __call__(self, x):
        return self.forward(x)

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict((f"encoder.{k}", v) for k, v in self.encoder.parameters().items())
        for name, decoder in self.decoders.items():
            for k, v in decoder.parameters().items():
                params[f"decoder.{name}.{k}"] = v
        return params


# ---------------------------------------------------------------- 构建器

def build_resnet_small(input_shape: Sequence[int], classes: int, width: int = 16, blocks: int = 4,
                       activation: str = "relu", slope: float = 0.2, seed: int = 0) -> Model:
    """
    小型残差卷积网络：stem 卷积 -> 残差块 -> 全局平均池化 -> 全连接

    每两个残差块构成一个阶段，新阶段通道翻倍、步长为 2
    """
    rng = np.random.default_rng(seed)
    channels = input_shape[0]
    layers: List[Layer] = [Conv2d(channels, width, rng), Activation(activation, slope)]
    current = width
    for index in range(blocks):
        stage = index // 2
        out_channels = width * (2 ** stage)
        stride = 2 if index > 0 and index % 2 == 0 else 1
        layers.append(ResidualBlock(current, out_channels, rng, stride, activation, slope))
        current = out_channels
    layers.extend([GlobalAvgPool(), Dense(current, classes, rng)])
    descriptor = {
        "builder": "resnet_small", "input_shape": list(input_shape), "classes": classes,
        "width": width, "blocks": blocks, "activation": activation, "slope": slope, "seed": seed,
    }
    return Model(layers, input_shape, descriptor)


def build_aux_classifier(input_shape: Sequence[int], classes: int, width: int = 16, blocks: int = 4,
                         seed: int = 1) -> Model:
    """辅助分类器：与主网络同拓扑，激活全部换成 leaky_relu(0.2)"""
    model = build_resnet_small(input_shape, classes, width, blocks, "leaky_relu", 0.2, seed)
    model.descriptor["builder"] = "aux_classifier"
    return model


def build_mlp(input_shape: Sequence[int], hidden: Sequence[int], outputs: int,
              activation: str = "relu", slope: float = 0.2, seed: int = 0) -> Model:
    """多层感知机，多维输入先展平"""
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    current = int(np.prod(input_shape))
    for width in hidden:
        layers.extend([Dense(current, width, rng), Activation(activation, slope)])
        current = width
    layers.append(Dense(current, outputs, rng))
    descriptor = {
        "builder": "mlp", "input_shape": list(input_shape), "hidden": list(hidden), "outputs": outputs,
        "activation": activation, "slope": slope, "seed": seed,
    }
    return Model(layers, input_shape, descriptor)


def build_conv_decoder(feature_shape: Sequence[int], out_channels: int, activation: str = "relu",
                       seed: int = 0) -> Model:
    """逐像素解码器：残差块 + 3x3 卷积输出"""
    rng = np.random.default_rng(seed)
    channels = feature_shape[0]
    layers = [ResidualBlock(channels, channels, rng, 1, activation), Conv2d(channels, out_channels, rng)]
    descriptor = {"builder": "conv_decoder", "feature_shape": list(feature_shape),
                  "out_channels": out_channels, "activation": activation, "seed": seed}
    return Model(layers, feature_shape, descriptor)


def build_conv_encoder(input_shape: Sequence[int], width: int = 8, blocks: int = 2,
                       activation: str = "relu", seed: int = 0) -> Model:
    """保持空间分辨率的共享编码器"""
    rng = np.random.default_rng(seed)
    layers: List[Layer] = [Conv2d(input_shape[0], width, rng), Activation(activation)]
    layers.extend(ResidualBlock(width, width, rng, 1, activation) for _ in range(blocks))
    descriptor = {"builder": "conv_encoder", "input_shape": list(input_shape), "width": width,
                  "blocks": blocks, "activation": activation, "seed": seed}
    return Model(layers, input_shape, descriptor)


def build_multitask_image_model(input_shape: Sequence[int], classes: int, width: int = 8,
                                seed: int = 0) -> MultiHeadModel:
    """小图像多任务模型：分类、去噪重建、边缘三个解码器"""
    encoder = build_conv_encoder(input_shape, width, 2, seed=seed)
    feature = encoder.output_shape
    decoders = OrderedDict([
        ("classification", build_resnet_small(feature, classes, width, 1, seed=seed + 1)),
        ("reconstruction", build_conv_decoder(feature, input_shape[0], seed=seed + 2)),
        ("edges", build_conv_decoder(feature, 1, seed=seed + 3)),
    ])
    return MultiHeadModel(encoder, decoders)


def build_two_task_model(input_dim: int, feature_dim: int = 16, output_dim: int = 2,
                         seed: int = 0) -> MultiHeadModel:
    """两层 MLP 共享编码器 + 两个回归解码器"""
    encoder = build_mlp((input_dim,), [feature_dim], feature_dim, seed=seed)
    decoders = OrderedDict(
        (name, build_mlp((feature_dim,), [feature_dim], output_dim, seed=seed + offset))
        for offset, name in enumerate(("task_1", "task_2"), start=1)
    )
    return MultiHeadModel(encoder, decoders)


BUILDERS: Dict[str, Callable[..., Model]] = {
    "resnet_small": build_resnet_small,
    "aux_classifier": build_aux_classifier,
    "mlp": build_mlp,
    "conv_decoder": build_conv_decoder,
    "conv_encoder": build_conv_encoder,
}


def build_from_descriptor(descriptor: Dict) -> Model:
    kwargs = dict(descriptor)
    builder = kwargs.pop("builder", None)
    if builder not in BUILDERS:
        raise ValueError(f"未知模型构建器: {builder}")
    if builder == "aux_classifier":
        kwargs.pop("activation", None)
        kwargs.pop("slope", None)
    return BUILDERS[builder](**kwargs)


# ---------------------------------------------------------------- 损失

@dataclass
class CrossEntropy:
    """softmax 交叉熵结果，附带对 logits 与对概率的逐样本梯度"""
    loss: Tensor
    probs: np.ndarray
    labels: np.ndarray

    def grad_logits(self) -> np.ndarray:
        """σ(a) - onehot"""
        return self.probs - one_hot(self.labels, self.probs.shape[1])

    def grad_probs(self) -> np.ndarray:
        """真实类别处为 -1/a_y，其余为 0"""
        rows = np.arange(self.labels.shape[0])
        true_probs = self.probs[rows, self.labels]
        if np.any(true_probs < PROB_FLOOR):
            logger.warning(f"⚠️ 真实类别概率低于 {PROB_FLOOR}, 已截断")
            true_probs = np.maximum(true_probs, PROB_FLOOR)
        grads = np.zeros_like(self.probs)
        grads[rows, self.labels] = -1.0 / true_probs
        return grads


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"标签必须在 [0, {classes}) 内")
    return labels


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> CrossEntropy:
    """批均值 -log softmax(logits)[y]，经 log-sum-exp 计算"""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits 必须是 [batch, classes], 收到 {logits.shape}")
    labels = _check_labels(labels, logits.shape[1])
    log_probs = log_softmax(logits, axis=1)
    picked = reduce_sum(log_probs * one_hot(labels, logits.shape[1]), axis=1)
    loss = -reduce_mean(picked)
    return CrossEntropy(loss=loss, probs=np.exp(log_probs.data), labels=labels)


def mse(prediction: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"mse: 形状 {prediction.shape} 与 {target.shape} 不一致")
    diff = prediction - target
    return reduce_mean(diff * diff)


def cosine_loss(prediction: Tensor, target) -> Tensor:
    """1 - |余弦相似度|，按样本展平后取批均值"""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"cosine_loss: 形状 {prediction.shape} 与 {target.shape} 不一致")
    batch = prediction.shape[0]
    p = reshape(prediction, (batch, -1))
    t = reshape(target, (batch, -1))
    if np.any(np.linalg.norm(p.data, axis=1) == 0) or np.any(np.linalg.norm(t.data, axis=1) == 0):
        raise ValueError("cosine_loss: 存在零范数向量")
    dot = reduce_sum(p * t, axis=1)
    norms = sqrt(reduce_sum(p * p, axis=1)) * sqrt(reduce_sum(t * t, axis=1))
    return reduce_mean(1.0 - absolute(dot / norms))


# ---------------------------------------------------------------- 优化器

GradLike = Union[np.ndarray, Tensor]


class Optimizer:
    """优化器基类：step 是参数唯一的修改点"""

    def __init__(self, params: Dict[str, Tensor], lr: float):
        self.params = OrderedDict(params)
        self.base_lr = lr
        self.lr_multiplier = 1.0
        self.step_count = 0
        self.skipped_steps = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.lr_multiplier

    def set_lr_multiplier(self, multiplier: float):
        self.lr_multiplier = multiplier

    def step(self, grads: Dict[str, GradLike]) -> bool:
        """
        按梯度更新参数

        Returns:
            False 表示因非有限梯度跳过了本步
        """
        arrays = {}
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(param.data)
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=DTYPE)
            if g.shape != param.shape:
                raise ShapeError(f"参数 {name} 梯度形状 {g.shape} 与参数 {param.shape} 不一致")
            arrays[name] = g
        if not all(np.all(np.isfinite(g)) for g in arrays.values()):
            self.skipped_steps += 1
            logger.warning(f"⚠️ 梯度含非有限值，跳过第 {self.step_count + 1} 步更新")
            return False
        self.step_count += 1
        for name, param in self.params.items():
            param.data = self._update(name, param.data, arrays[name])
        return True

    def _update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Adam(Optimizer):

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def _update(self, name, value, grad):
        if self.weight_decay:
            grad = grad + self.weight_decay * value
        self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        m_hat = self.m[name] / (1 - self.beta1 ** self.step_count)
        v_hat = self.v[name] / (1 - self.beta2 ** self.step_count)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD(Optimizer):

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def _update(self, name, value, grad):
        if self.weight_decay:
            grad = grad + self.weight_decay * value
        self.velocity[name] = self.momentum * self.velocity[name] + grad
        return value - self.lr * self.velocity[name]


def build_optimizer(kind: str, params: Dict[str, Tensor], lr: float, momentum: float = 0.9,
                    weight_decay: float = 0.0) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr, momentum, weight_decay)
    raise ValueError(f"未知优化器 {kind}")


def optimizer_step(optimizer: Optimizer, grads: Dict[str, GradLike]) -> bool:
    return optimizer.step(grads)


def named_grads(params: Dict[str, Tensor], grads: Dict[Tensor, Tensor]) -> Dict[str, np.ndarray]:
    """把 backward 结果按参数名整理"""
    return OrderedDict((name, grads[p].data) for name, p in params.items() if p in grads)


# ---------------------------------------------------------------- 训练与评估

def supervised_step(model: Model, x: np.ndarray, y: np.ndarray, optimizer: Optimizer) -> Tuple[float, float]:
    """一步普通交叉熵训练，返回 (loss, accuracy)"""
    params = model.parameters()
    with Tape():
        ce = softmax_cross_entropy(model(Tensor(x)), y)
        grads = backward(ce.loss, list(params.values()))
    optimizer.step(named_grads(params, grads))
    accuracy = float(np.mean(np.argmax(ce.probs, axis=1) == ce.labels))
    return ce.loss.item(), accuracy


def predict_proba(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outputs = []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            outputs.append(softmax(model(Tensor(x[start:start + batch_size])), axis=1).data)
    return np.concatenate(outputs, axis=0)


def evaluate_accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if x.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(predict_proba(model, x, batch_size), axis=1) == np.asarray(y)))


# ---------------------------------------------------------------- 检查点

def save_checkpoint(path: str, model: Model, seed: int, step: int, extra: Optional[Dict] = None):
    """
    保存检查点：魔数 + 头长度(小端 u64) + JSON 头 + 按参数顺序排列的小端 float64
    """
    params = model.parameters()
    header = {
        "architecture": model.descriptor,
        "seed": seed,
        "step": step,
        "parameters": [{"name": name, "shape": list(p.shape)} for name, p in params.items()],
    }
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    logger.info(f"💾 检查点已保存: {path}")


def load_checkpoint(path: str) -> Tuple[Model, Dict]:
    """读取检查点并按架构描述重建模型"""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"检查点魔数错误: {path}")
        (length,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(length).decode("utf-8"))
        state = OrderedDict()
        for entry in header["parameters"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"检查点截断于参数 {entry['name']}")
            state[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(DTYPE)
    model = build_from_descriptor(header["architecture"])
    model.load_state_dict(state)
    return model, header
