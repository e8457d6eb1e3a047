#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
自动微分磁带 - 反向模式自动微分，支持把梯度计算本身记录为可微节点（二阶反向传播）
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class TapeError(Exception):
    """磁带相关错误的基类"""


class ShapeError(TapeError, ValueError):
    """输入形状与算子不兼容"""


class NonFiniteError(TapeError, ArithmeticError):
    """前向或反向计算出现 NaN/Inf"""

    def __init__(self, message: str, kind: Optional[str] = None, node_id: Optional[int] = None):
        super().__init__(message)
        self.kind = kind
        self.node_id = node_id


_state = threading.local()


def _tapes() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.grad_enabled = True
    return _state.tapes


def _grad_enabled() -> bool:
    _tapes()
    return _state.grad_enabled


def active_tape() -> Optional["Tape"]:
    """返回当前线程正在记录的磁带；no_grad 内返回 None"""
    tapes = _tapes()
    if not tapes or not _state.grad_enabled:
        return None
    return tapes[-1]


@contextmanager
def no_grad():
    """暂停记录，块内的运算结果不绑定到任何磁带"""
    _tapes()
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def _recording(tape: "Tape"):
    _tapes()
    previous = _state.grad_enabled
    _state.grad_enabled = True
    _state.tapes.append(tape)
    try:
        yield
    finally:
        _state.tapes.pop()
        _state.grad_enabled = previous


@dataclass
class Node:
    """磁带上的一个运算节点"""
    node_id: int
    kind: str                                   # 运算类型
    inputs: Tuple["Tensor", ...]                # 父张量
    needs_grad: Tuple[bool, ...]                # 每个父张量是否需要梯度
    saved: Dict[str, Any] = field(default_factory=dict)  # 反向所需的前向值
    output: Optional["Tensor"] = None

    @property
    def parents(self) -> Tuple[Optional[int], ...]:
        return tuple(t.node if t.tape is self.output.tape else None for t in self.inputs)


class Tape:
    """只追加的计算图，父节点编号总是小于子节点编号"""

    def __init__(self, name: str = "tape"):
        self.name = name
        self.nodes: List[Node] = []
        self.warnings: List[Dict[str, Any]] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tapes().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple["Tensor", ...], needs_grad: Tuple[bool, ...],
               saved: Dict[str, Any], output: "Tensor") -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node(node_id, kind, inputs, needs_grad, saved, output))
        return node_id

    def warn(self, message: str, **details):
        record = {"message": message, **details}
        self.warnings.append(record)
        logger.warning(f"⚠️ {message}")


class Tensor:
    """float64 张量，可选地绑定到活动磁带上的节点"""

    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"张量 {name or ''} 创建时包含非有限值", kind="leaf")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = False
        tensor.name = None
        tensor.node = None
        tensor.tape = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"item() 只适用于单元素张量, 当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def tracked_on(self, tape: Optional[Tape]) -> bool:
        """在给定磁带上是否参与求导"""
        if tape is None:
            return False
        return self.requires_grad or (self.node is not None and self.tape is tape)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        bound = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{label}{bound})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return take(self, key)

    def sum(self, axis=None, keepdims: bool = False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return reduce_mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    """生成运算结果；任一输入需要梯度时把结果记录到活动磁带"""
    data = np.asarray(data, dtype=DTYPE)
    tape = active_tape()
    needs = tuple(t.tracked_on(tape) for t in inputs)
    tracked = tape is not None and any(needs)
    if not np.all(np.isfinite(data)):
        node_id = len(tape.nodes) if tracked else None
        raise NonFiniteError(f"运算 {kind} 产生非有限值 (node={node_id})", kind=kind, node_id=node_id)
    out = Tensor._wrap(data)
    if tracked:
        out.node = tape.record(kind, tuple(inputs), needs, saved, out)
        out.tape = tape
    return out


# ---------------------------------------------------------------- 前向算子

def _check_broadcast(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: 形状 {a.shape} 与 {b.shape} 无法广播")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _emit("div", data, (a, b))


def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: 形状 {a.shape} 与 {b.shape} 不兼容")
    return _emit("matmul", np.matmul(a.data, b.data), (a, b))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,), axes=axes)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: 无法把 {x.shape} 变为 {tuple(shape)}")
    return _emit("reshape", data, (x,), shape=x.shape)


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: 无法把 {x.shape} 广播到 {tuple(shape)}")
    return _emit("broadcast_to", data, (x,), shape=x.shape)


def _normalize_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    data = np.sum(x.data, axis=axes, keepdims=keepdims)
    return _emit("sum", data, (x,), axes=axes, keepdims=keepdims, shape=x.shape)


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = np.mean(x.data, axis=axes, keepdims=keepdims)
    return _emit("mean", data, (x,), axes=axes, keepdims=keepdims, shape=x.shape, count=count)


def sum_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """把广播后的梯度求和回原始形状"""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead > 0:
        x = reduce_sum(x, axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = reduce_sum(x, axis=axes, keepdims=True)
    return x


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(DTYPE)
    return _emit("relu", x.data * mask, (x,), mask=mask)


def leaky_relu(x: ArrayLike, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu 斜率必须在 (0,1) 内, 收到 {slope}")
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit("leaky_relu", x.data * factor, (x,), mask=factor, slope=slope)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _emit("softmax", e / np.sum(e, axis=axis, keepdims=True), (x,), axis=axis)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return _emit("log_softmax", data, (x,), axis=axis)


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _emit("log", data, (x,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _emit("exp", data, (x,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)
    return _emit("sqrt", data, (x,))


def absolute(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,), sign=np.sign(x.data))


def clip(x: ArrayLike, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(DTYPE)
    return _emit("clip", np.clip(x.data, lo, hi), (x,), mask=mask)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: 形状 {[t.shape for t in tensors]} 在轴 {axis} 上无法拼接")
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", data, tensors, axis=axis % data.ndim, sizes=sizes)


def take(x: ArrayLike, key) -> Tensor:
    """切片/索引"""
    x = as_tensor(x)
    try:
        data = x.data[key]
    except IndexError as e:
        raise ShapeError(f"slice: 索引 {key} 不适用于形状 {x.shape}: {e}")
    return _emit("slice", np.array(data, dtype=DTYPE), (x,), key=key, shape=x.shape)


def scatter(x: ArrayLike, key, shape: Tuple[int, ...]) -> Tensor:
    """slice 的伴随：把 x 放回到全零张量的 key 位置"""
    x = as_tensor(x)
    buffer = np.zeros(shape, dtype=DTYPE)
    np.add.at(buffer, key, x.data)
    return _emit("scatter", buffer, (x,), key=key)


def gradient_reversal(x: ArrayLike, lam: float = 1.0) -> Tensor:
    """梯度反转：前向恒等，反向把上游梯度乘以 -lam"""
    x = as_tensor(x)
    return _emit("gradient_reversal", x.data.copy(), (x,), lam=float(lam))


# ---------------------------------------------------------------- 卷积（3x3，padding 1）

def _conv_out(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def im2col(x: ArrayLike, stride: int = 1) -> Tensor:
    """(N,C,H,W) -> (N, C*9, Ho*Wo)"""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d-3x3: 输入必须是 4 维 (N,C,H,W), 收到 {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, stride), _conv_out(w, stride)
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=DTYPE)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = padded[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                                        kj:kj + stride * (wo - 1) + 1:stride]
    return _emit("im2col", cols.reshape(n, c * 9, ho * wo), (x,), stride=stride, shape=x.shape)


def col2im(cols: ArrayLike, shape: Tuple[int, ...], stride: int = 1) -> Tensor:
    cols = as_tensor(cols)
    n, c, h, w = shape
    ho, wo = _conv_out(h, stride), _conv_out(w, stride)
    blocks = cols.data.reshape(n, c, 3, 3, ho, wo)
    buffer = np.zeros((n, c, h + 2, w + 2), dtype=DTYPE)
    for ki in range(3):
        for kj in range(3):
            buffer[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                   kj:kj + stride * (wo - 1) + 1:stride] += blocks[:, :, ki, kj]
    return _emit("col2im", buffer[:, :, 1:-1, 1:-1].copy(), (cols,), stride=stride)


def conv2d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None, stride: int = 1) -> Tensor:
    """3x3 卷积，步长 1 或 2，零填充 1"""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d-3x3: 步长只能是 1 或 2, 收到 {stride}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d-3x3: 输入 {x.shape} 与卷积核 {weight.shape} 不兼容")
    n, _, h, w = x.shape
    out_channels = weight.shape[0]
    cols = im2col(x, stride)
    kernel = reshape(weight, (out_channels, -1))
    out = reshape(matmul(kernel, cols), (n, out_channels, _conv_out(h, stride), _conv_out(w, stride)))
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, out_channels, 1, 1))
    return out


# ---------------------------------------------------------------- 反向规则（均由可微算子构成）

def _vjp_add(g, node):
    a, b = node.inputs
    return sum_to(g, a.shape), sum_to(g, b.shape)


def _vjp_sub(g, node):
    a, b = node.inputs
    return sum_to(g, a.shape), (sum_to(neg(g), b.shape) if node.needs_grad[1] else None)


def _vjp_mul(g, node):
    a, b = node.inputs
    ga = sum_to(mul(g, b), a.shape) if node.needs_grad[0] else None
    gb = sum_to(mul(g, a), b.shape) if node.needs_grad[1] else None
    return ga, gb


def _vjp_div(g, node):
    a, b = node.inputs
    ga = sum_to(div(g, b), a.shape) if node.needs_grad[0] else None
    gb = sum_to(neg(div(mul(g, node.output), b)), b.shape) if node.needs_grad[1] else None
    return ga, gb


def _vjp_neg(g, node):
    return (neg(g),)


def _vjp_matmul(g, node):
    a, b = node.inputs
    ga = sum_to(matmul(g, swap_last(b)), a.shape) if node.needs_grad[0] else None
    gb = sum_to(matmul(swap_last(a), g), b.shape) if node.needs_grad[1] else None
    return ga, gb


def _vjp_transpose(g, node):
    return (transpose(g, np.argsort(node.saved["axes"])),)


def _vjp_reshape(g, node):
    return (reshape(g, node.saved["shape"]),)


def _vjp_broadcast_to(g, node):
    return (sum_to(g, node.saved["shape"]),)


def _expand_reduced(g, node):
    shape = node.saved["shape"]
    if not node.saved["keepdims"]:
        kept = tuple(1 if i in node.saved["axes"] else n for i, n in enumerate(shape))
        g = reshape(g, kept)
    return broadcast_to(g, shape)


def _vjp_sum(g, node):
    return (_expand_reduced(g, node),)


def _vjp_mean(g, node):
    return (mul(_expand_reduced(g, node), 1.0 / node.saved["count"]),)


def _vjp_relu(g, node):
    # 分段线性：二阶项恒为 0，掩码作为常量参与
    return (mul(g, node.saved["mask"]),)


def _vjp_leaky_relu(g, node):
    return (mul(g, node.saved["mask"]),)


def _vjp_softmax(g, node):
    s = node.output
    axis = node.saved["axis"]
    return (mul(s, sub(g, reduce_sum(mul(g, s), axis=axis, keepdims=True))),)


def _vjp_log_softmax(g, node):
    axis = node.saved["axis"]
    return (sub(g, mul(exp(node.output), reduce_sum(g, axis=axis, keepdims=True))),)


def _vjp_log(g, node):
    return (div(g, node.inputs[0]),)


def _vjp_exp(g, node):
    return (mul(g, node.output),)


def _vjp_sqrt(g, node):
    return (div(g, mul(node.output, 2.0)),)


def _vjp_abs(g, node):
    return (mul(g, node.saved["sign"]),)


def _vjp_clip(g, node):
    return (mul(g, node.saved["mask"]),)


def _vjp_concat(g, node):
    axis = node.saved["axis"]
    grads, start = [], 0
    for size, needed in zip(node.saved["sizes"], node.needs_grad):
        key = (slice(None),) * axis + (slice(start, start + size),)
        grads.append(take(g, key) if needed else None)
        start += size
    return tuple(grads)


def _vjp_slice(g, node):
    return (scatter(g, node.saved["key"], node.saved["shape"]),)


def _vjp_scatter(g, node):
    return (take(g, node.saved["key"]),)


def _vjp_gradient_reversal(g, node):
    return (mul(g, -node.saved["lam"]),)


def _vjp_im2col(g, node):
    return (col2im(g, node.saved["shape"], node.saved["stride"]),)


def _vjp_col2im(g, node):
    return (im2col(g, node.saved["stride"]),)


_VJP: Dict[str, Callable[[Tensor, Node], Tuple[Optional[Tensor], ...]]] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "relu": _vjp_relu,
    "leaky_relu": _vjp_leaky_relu,
    "softmax": _vjp_softmax,
    "log_softmax": _vjp_log_softmax,
    "log": _vjp_log,
    "exp": _vjp_exp,
    "sqrt": _vjp_sqrt,
    "abs": _vjp_abs,
    "clip": _vjp_clip,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "scatter": _vjp_scatter,
    "gradient_reversal": _vjp_gradient_reversal,
    "im2col": _vjp_im2col,
    "col2im": _vjp_col2im,
}


# ---------------------------------------------------------------- 反向传播

def _accumulate(store: Dict, key, grad: Tensor) -> None:
    store[key] = grad if key not in store else add(store[key], grad)


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> Dict[Tensor, Tensor]:
    """
    计算标量 output 对 wrt 中每个张量的梯度

    Args:
        output: 标量输出
        wrt: 求导对象（叶子参数或磁带上的中间张量）
        create_graph: 为 True 时梯度计算本身记录到磁带上，可再次求导

    Returns:
        wrt 张量 -> 梯度张量
    """
    if output.size != 1:
        raise TapeError(f"backward 需要标量输出, 收到形状 {output.shape}")
    wrt = list(wrt)
    tape = output.tape
    seed = Tensor._wrap(np.ones_like(output.data))

    by_node: Dict[int, List[Tensor]] = {}
    for tensor in wrt:
        if tensor.node is not None and tensor.tape is tape:
            by_node.setdefault(tensor.node, []).append(tensor)
    wrt_ids = {id(t) for t in wrt}

    found: Dict[int, Tensor] = {}
    if id(output) in wrt_ids:
        found[id(output)] = seed

    if tape is not None and output.node is not None:
        node_grads: Dict[int, Tensor] = {output.node: seed}
        leaf_grads: Dict[int, Tensor] = {}
        context = _recording(tape) if create_graph else no_grad()
        with context:
            for node_id in range(output.node, -1, -1):
                g = node_grads.pop(node_id, None)
                if g is None:
                    continue
                for tensor in by_node.get(node_id, ()):
                    found[id(tensor)] = g
                node = tape.nodes[node_id]
                try:
                    input_grads = _VJP[node.kind](g, node)
                except NonFiniteError as e:
                    raise NonFiniteError(f"反向传播在节点 {node_id} ({node.kind}) 产生非有限值: {e}",
                                         kind=node.kind, node_id=node_id) from e
                for tensor, needed, gi in zip(node.inputs, node.needs_grad, input_grads):
                    if not needed or gi is None:
                        continue
                    if tensor.node is not None and tensor.tape is tape:
                        _accumulate(node_grads, tensor.node, gi)
                    elif tensor.requires_grad:
                        _accumulate(leaf_grads, id(tensor), gi)
            for tensor in wrt:
                if tensor.requires_grad and id(tensor) in leaf_grads:
                    found[id(tensor)] = leaf_grads[id(tensor)]

    result: Dict[Tensor, Tensor] = {}
    for tensor in wrt:
        if id(tensor) in found:
            result[tensor] = found[id(tensor)]
        else:
            message = f"张量 {tensor.name or tensor.shape} 与输出不连通，梯度记为 0"
            if tape is not None:
                tape.warn(message, tensor=tensor.name)
            else:
                logger.warning(f"⚠️ {message}")
            result[tensor] = Tensor._wrap(np.zeros_like(tensor.data))
    return result


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """backward 的列表形式，顺序与 wrt 一致"""
    grads = backward(output, wrt, create_graph)
    return [grads[t] for t in wrt]


def finite_difference_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """
    比较磁带梯度与中心差分，返回最大相对误差 |g_tape - g_fd| / max(|g_fd|, 1e-8)
    """
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    with Tape():
        leaf = Tensor(base, requires_grad=True)
        value = f(leaf)
        tape_grad = backward(value, [leaf])[leaf].data

    def evaluate(point: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(point))
        result = float(np.sum(out.data))
        if not np.isfinite(result):
            raise NonFiniteError("finite_difference_check: 函数值非有限", kind="finite_difference")
        return result

    fd_grad = np.zeros_like(base)
    flat = fd_grad.reshape(-1)
    for i in range(base.size):
        step = np.zeros(base.size, dtype=DTYPE)
        step[i] = h
        step = step.reshape(base.shape)
        flat[i] = (evaluate(base + step) - evaluate(base - step)) / (2.0 * h)

    error = np.abs(tape_grad - fd_grad) / np.maximum(np.abs(fd_grad), 1e-8)
    return float(np.max(error)) if error.size else 0.0


def forward_op(kind: str, *inputs: ArrayLike, **params) -> Tensor:
    """按名称分发前向算子"""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
        "conv2d-3x3": conv2d, "relu": relu, "leaky_relu": leaky_relu, "softmax": softmax,
        "log_softmax": log_softmax, "log": log, "exp": exp, "sum": reduce_sum, "mean": reduce_mean,
        "reshape": reshape, "concat": lambda *ts, **kw: concat(ts, **kw), "slice": take,
    }
    if kind not in table:
        raise TapeError(f"未知算子类型: {kind}")
    return table[kind](*inputs, **params)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros((labels.shape[0], classes), dtype=DTYPE)
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def product(shape: Sequence[int]) -> int:
    return int(reduce(lambda a, b: a * b, shape, 1))
