#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数据模块 - IDX 读写、合成数据集、多任务目标变换与数据增强
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from great.core.models import DatasetConfig

logger = logging.getLogger(__name__)

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    """IDX 文件格式错误，offset 为出错处的字节偏移"""

    def __init__(self, message: str, path: str, offset: int):
        super().__init__(f"{path}: {message} (offset={offset})")
        self.path = path
        self.offset = offset


# ---------------------------------------------------------------- IDX

def read_idx(path: str) -> np.ndarray:
    """
    读取 IDX 文件

    Returns:
        图像文件返回 [N,1,H,W] 的 [0,1] 浮点数组；标签文件返回 int64 数组
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError("文件过短，缺少魔数", path, len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_LABEL_MAGIC, IDX_IMAGE_MAGIC):
        raise IdxFormatError(f"魔数非法 0x{magic:08x}", path, 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError("维度头被截断", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) < header_end + count:
        raise IdxFormatError(f"数据被截断，期望 {count} 字节", path, len(raw))
    values = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)
    if magic == IDX_LABEL_MAGIC:
        return values.astype(np.int64)
    return (values.astype(np.float64) / 255.0)[:, None, :, :]


def write_idx(path: str, array: np.ndarray):
    """把标签 (N,) 或 [0,1] 图像 (N,H,W)/(N,1,H,W) 写为 IDX"""
    array = np.asarray(array)
    if array.ndim == 4:
        if array.shape[1] != 1:
            raise ValueError(f"IDX 只支持单通道图像, 收到 {array.shape}")
        array = array[:, 0]
    if array.ndim == 1:
        magic, payload = IDX_LABEL_MAGIC, array.astype(np.uint8)
    elif array.ndim == 3:
        magic = IDX_IMAGE_MAGIC
        payload = np.clip(np.rint(np.asarray(array, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"IDX 不支持 {array.ndim} 维数组")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{payload.ndim}I", *payload.shape))
        f.write(payload.tobytes())


# ---------------------------------------------------------------- 数据集

@dataclass
class Dataset:
    """训练/测试划分；分类标签放在 y_*，其余任务目标放在 targets_*"""
    x_train: np.ndarray
    x_test: np.ndarray
    y_train: Optional[np.ndarray] = None
    y_test: Optional[np.ndarray] = None
    targets_train: Dict[str, np.ndarray] = field(default_factory=dict)
    targets_test: Dict[str, np.ndarray] = field(default_factory=dict)
    name: str = "dataset"
    fraction: float = 1.0
    classes: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction 必须在 (0,1] 内, 收到 {self.fraction}")
        for split, x, y, targets in (("train", self.x_train, self.y_train, self.targets_train),
                                     ("test", self.x_test, self.y_test, self.targets_test)):
            if y is not None and len(y) != len(x):
                raise ValueError(f"{split}: 输入 {len(x)} 与标签 {len(y)} 数量不一致")
            for task, target in targets.items():
                if len(target) != len(x):
                    raise ValueError(f"{split}: 任务 {task} 目标数量 {len(target)} 与输入 {len(x)} 不一致")

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def describe(self) -> Dict:
        return {
            "name": self.name,
            "n_train": int(len(self.x_train)),
            "n_test": int(len(self.x_test)),
            "classes": self.classes,
            "fraction": self.fraction,
            "input_shape": list(self.input_shape),
        }

    def subsample(self, fraction: float, seed: int = 0) -> "Dataset":
        """
        稀疏采样：恰好取 ⌊fraction·n⌋ 个训练样本；有分类标签时按类别分层
        """
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction 必须在 (0,1] 内, 收到 {fraction}")
        n = len(self.x_train)
        total = int(np.floor(fraction * n))
        if total < 1:
            raise ValueError(f"fraction={fraction} 在 {n} 个样本上选不出任何样本")
        rng = np.random.default_rng(seed)
        if self.y_train is None:
            chosen = np.sort(rng.permutation(n)[:total])
        else:
            chosen = _stratified_indices(self.y_train, total, rng)
        return Dataset(
            x_train=self.x_train[chosen],
            x_test=self.x_test,
            y_train=None if self.y_train is None else self.y_train[chosen],
            y_test=self.y_test,
            targets_train={k: v[chosen] for k, v in self.targets_train.items()},
            targets_test=dict(self.targets_test),
            name=self.name,
            fraction=fraction,
            classes=self.classes,
        )


def _stratified_indices(labels: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * (total / len(labels))
    quota = np.floor(exact).astype(int)
    # 余额按小数部分从大到小分配，同值取类别序号小者
    remainder = total - int(quota.sum())
    order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))
    for i in order[:remainder]:
        quota[i] += 1
    chosen = []
    for cls, k in zip(classes, quota):
        members = np.flatnonzero(labels == cls)
        chosen.append(rng.permutation(members)[:k])
    return np.sort(np.concatenate(chosen))


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """按批产出样本下标；给定 rng 时先打乱"""
    if batch_size < 1:
        raise ValueError(f"batch_size 必须 >= 1, 收到 {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------- 图像变换

def canny(image: np.ndarray, sigma: float = 1.0, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """
    Canny 边缘检测：高斯平滑、Sobel 梯度、非极大值抑制、双阈值滞后连接

    Args:
        image: 二维灰度图
        low, high: 相对最大梯度幅值的阈值比例

    Returns:
        {0,1} 二值边缘图
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"canny 需要二维图像, 收到 {image.shape}")
    smoothed = ndimage.gaussian_filter(image, sigma)
    gx = ndimage.sobel(smoothed, axis=1)
    gy = ndimage.sobel(smoothed, axis=0)
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    if peak <= 1e-12:
        return np.zeros_like(image)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(magnitude, 1)
    h, w = image.shape

    def shifted(di, dj):
        return padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]

    # 四个量化方向上的两侧邻居
    neighbors = [
        ((angle < 22.5) | (angle >= 157.5), shifted(0, 1), shifted(0, -1)),
        ((angle >= 22.5) & (angle < 67.5), shifted(1, 1), shifted(-1, -1)),
        ((angle >= 67.5) & (angle < 112.5), shifted(1, 0), shifted(-1, 0)),
        ((angle >= 112.5) & (angle < 157.5), shifted(1, -1), shifted(-1, 1)),
    ]
    keep = np.zeros_like(magnitude, dtype=bool)
    for direction, before, after in neighbors:
        keep |= direction & (magnitude >= before) & (magnitude >= after)
    thin = np.where(keep, magnitude, 0.0)

    strong = thin >= high * peak
    candidate = thin >= low * peak
    labels, count = ndimage.label(candidate, structure=np.ones((3, 3)))
    if count == 0:
        return np.zeros_like(image)
    connected = np.unique(labels[strong])
    connected = connected[connected > 0]
    return np.isin(labels, connected).astype(np.float64)


def salt_and_pepper(image: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """恰好翻转 ⌊amount·H·W⌋ 个像素，一半置 0、一半置 1"""
    noisy = np.array(image, dtype=np.float64)
    flat = noisy.reshape(-1)
    count = int(np.floor(amount * flat.size))
    if count == 0:
        return noisy
    chosen = rng.choice(flat.size, size=count, replace=False)
    flat[chosen[:count // 2]] = 0.0
    flat[chosen[count // 2:]] = 1.0
    return noisy


def speckle(image: np.ndarray, level: float, rng: np.random.Generator, mode: str = "std") -> np.ndarray:
    """乘性高斯噪声 x·(1+n)；mode=std 时 level 是标准差，mode=variance 时是方差"""
    if mode not in ("std", "variance"):
        raise ValueError(f"未知 speckle 模式 {mode}")
    if level == 0:
        return np.array(image, dtype=np.float64)
    std = level if mode == "std" else np.sqrt(level)
    return np.clip(image * (1.0 + rng.normal(0.0, std, size=np.shape(image))), 0.0, 1.0)


def multitask_targets(image: np.ndarray, rng: np.random.Generator, salt_pepper: float = 0.04,
                      speckle_level: float = 0.1, speckle_mode: str = "std",
                      sigma: float = 1.0) -> Dict[str, np.ndarray]:
    """
    由一张灰度图生成多任务样本

    Returns:
        {"input": 含噪输入, "reconstruction": 干净原图, "edges": Canny 边缘图}
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 3
    plane = image[0] if squeeze else image
    noisy = speckle(salt_and_pepper(plane, salt_pepper, rng), speckle_level, rng, speckle_mode)
    edges = canny(plane, sigma)
    if squeeze:
        return {"input": noisy[None], "reconstruction": plane[None].copy(), "edges": edges[None]}
    return {"input": noisy, "reconstruction": plane.copy(), "edges": edges}


def hflip(image: np.ndarray) -> np.ndarray:
    return np.array(image[..., ::-1])


def crop(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    return np.array(image[..., top:top + height, left:left + width])


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """四周补零 pad 像素后随机裁剪回原尺寸，并以 0.5 概率水平翻转"""
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[-2:]
    widths = [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(image, widths)
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    out = crop(padded, int(top), int(left), height, width)
    if flip and rng.random() < 0.5:
        out = hflip(out)
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(image, rng) for image in images])


# ---------------------------------------------------------------- 合成数据

def synthetic_classification(n: int, classes: int, seed: int = 0, shape: Sequence[int] = (1, 8, 8),
                             noise: float = 0.15, n_test: Optional[int] = None) -> Dataset:
    """高斯团分类数据：每类一个 [0.2,0.8] 内的原型，加独立高斯噪声后截断到 [0,1]"""
    if n <= 0:
        raise ValueError(f"n 必须为正, 收到 {n}")
    if classes < 2:
        raise ValueError(f"classes 必须 >= 2, 收到 {classes}")
    n_test = n // 2 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    prototypes = rng.uniform(0.2, 0.8, size=(classes,) + shape)

    def draw(count):
        labels = rng.integers(0, classes, size=count)
        samples = prototypes[labels] + noise * rng.normal(size=(count,) + shape)
        return np.clip(samples, 0.0, 1.0), labels.astype(np.int64)

    x_train, y_train = draw(n)
    x_test, y_test = draw(n_test)
    return Dataset(x_train=x_train, x_test=x_test, y_train=y_train, y_test=y_test,
                   name="synthetic_classification", classes=classes)


def _class_motifs(classes: int, rng: np.random.Generator, size: int = 3) -> np.ndarray:
    """每类一个互不相同的 size×size 二值图案，亮点数在 [3, size²-3]"""
    motifs, seen = [], set()
    while len(motifs) < classes:
        motif = rng.integers(0, 2, size=(size, size))
        key = motif.tobytes()
        if key in seen or not 3 <= motif.sum() <= size * size - 3:
            continue
        seen.add(key)
        motifs.append(motif.astype(np.float64))
    return np.stack(motifs)


def synthetic_images(n: int, classes: int, seed: int = 0, shape: Sequence[int] = (1, 8, 8),
                     noise: float = 0.15, n_test: Optional[int] = None) -> Dataset:
    """
    小图像分类数据：每类一个 3×3 二值图案，随机平移到画布上，背景 0.1、图案 0.9，
    加高斯噪声后截断到 [0,1]

    类别只由局部图案决定，与位置无关
    """
    if n <= 0:
        raise ValueError(f"n 必须为正, 收到 {n}")
    if classes < 2:
        raise ValueError(f"classes 必须 >= 2, 收到 {classes}")
    channels, height, width = tuple(shape)
    if height < 3 or width < 3:
        raise ValueError(f"画布至少 3×3, 收到 {shape}")
    n_test = n // 2 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    motifs = _class_motifs(classes, rng)

    def draw(count):
        labels = rng.integers(0, classes, size=count)
        images = np.full((count, channels, height, width), 0.1)
        tops = rng.integers(0, height - 2, size=count)
        lefts = rng.integers(0, width - 2, size=count)
        for i, (label, top, left) in enumerate(zip(labels, tops, lefts)):
            images[i, :, top:top + 3, left:left + 3] += 0.8 * motifs[label]
        images += noise * rng.normal(size=images.shape)
        return np.clip(images, 0.0, 1.0), labels.astype(np.int64)

    x_train, y_train = draw(n)
    x_test, y_test = draw(n_test)
    return Dataset(x_train=x_train, x_test=x_test, y_train=y_train, y_test=y_test,
                   name="synthetic_images", classes=classes)


def synthetic_two_task(n: int, scale: float = 100.0, seed: int = 0, input_dim: int = 8,
                       output_dim: int = 2, n_test: Optional[int] = None) -> Dataset:
    """两个回归任务，任务 2 的目标是任务 1 的 scale 倍"""
    if n <= 0:
        raise ValueError(f"n 必须为正, 收到 {n}")
    n_test = n // 2 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    mixing = rng.normal(size=(input_dim, output_dim)) / np.sqrt(input_dim)

    def draw(count):
        x = rng.normal(size=(count, input_dim))
        base = np.tanh(x @ mixing)
        return x, {"task_1": base, "task_2": scale * base}

    x_train, t_train = draw(n)
    x_test, t_test = draw(n_test)
    return Dataset(x_train=x_train, x_test=x_test, targets_train=t_train, targets_test=t_test,
                   name="synthetic_two_task")


def image_multitask_suite(n: int, seed: int = 0, size: int = 8, classes: int = 4,
                          n_test: Optional[int] = None, speckle_mode: str = "std") -> Dataset:
    """
    小图多任务数据：输入为含噪灰度图，任务为分类、去噪重建与边缘检测
    """
    n_test = n // 2 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    fields = ndimage.gaussian_filter(rng.uniform(size=(classes, size, size)), sigma=(0, 1.5, 1.5))
    lo = fields.min(axis=(1, 2), keepdims=True)
    hi = fields.max(axis=(1, 2), keepdims=True)
    prototypes = (fields - lo) / np.maximum(hi - lo, 1e-12)

    def draw(count):
        labels = rng.integers(0, classes, size=count)
        clean = np.clip(prototypes[labels] + 0.05 * rng.normal(size=(count, size, size)), 0.0, 1.0)
        samples = [multitask_targets(image, rng, speckle_mode=speckle_mode) for image in clean]
        inputs = np.stack([s["input"] for s in samples])[:, None]
        targets = {
            "reconstruction": np.stack([s["reconstruction"] for s in samples])[:, None],
            "edges": np.stack([s["edges"] for s in samples])[:, None],
        }
        return inputs, labels.astype(np.int64), targets

    x_train, y_train, t_train = draw(n)
    x_test, y_test, t_test = draw(n_test)
    return Dataset(x_train=x_train, x_test=x_test, y_train=y_train, y_test=y_test,
                   targets_train=t_train, targets_test=t_test, name="image_multitask", classes=classes)


# ---------------------------------------------------------------- 加载

def save_idx_dataset(dataset: Dataset, directory: str):
    """把分类数据集写成四个 IDX 文件"""
    if dataset.y_train is None:
        raise ValueError("只有分类数据集可以写成 IDX")
    os.makedirs(directory, exist_ok=True)
    write_idx(os.path.join(directory, IDX_FILES["train_images"]), dataset.x_train)
    write_idx(os.path.join(directory, IDX_FILES["train_labels"]), dataset.y_train)
    write_idx(os.path.join(directory, IDX_FILES["test_images"]), dataset.x_test)
    write_idx(os.path.join(directory, IDX_FILES["test_labels"]), dataset.y_test)


def load_idx_dataset(directory: str, name: str = "idx") -> Dataset:
    arrays = {key: read_idx(os.path.join(directory, filename)) for key, filename in IDX_FILES.items()}
    classes = int(max(arrays["train_labels"].max(), arrays["test_labels"].max())) + 1
    return Dataset(x_train=arrays["train_images"], x_test=arrays["test_images"],
                   y_train=arrays["train_labels"], y_test=arrays["test_labels"], name=name, classes=classes)


def load_manifest(path: str) -> Dict:
    """读取数据集清单 JSON {path, fraction, seed, split}，path 相对清单所在目录解析"""
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if "path" not in manifest:
        raise ValueError(f"数据集清单缺少 path 字段: {path}")
    if not os.path.isabs(manifest["path"]):
        manifest["path"] = os.path.join(os.path.dirname(os.path.abspath(path)), manifest["path"])
    manifest.setdefault("fraction", 1.0)
    manifest.setdefault("seed", 0)
    manifest.setdefault("split", "train")
    return manifest


def load_dataset(config: DatasetConfig) -> Dataset:
    """按配置构建数据集，并应用稀疏采样比例"""
    if config.kind == "synthetic_classification":
        dataset = synthetic_classification(config.n_train, config.classes, config.seed, config.shape,
                                           config.noise, config.n_test)
    elif config.kind == "synthetic_images":
        dataset = synthetic_images(config.n_train, config.classes, config.seed, config.shape, config.noise,
                                   config.n_test)
    elif config.kind == "synthetic_two_task":
        dataset = synthetic_two_task(config.n_train, seed=config.seed, n_test=config.n_test)
    elif config.kind == "image_multitask":
        dataset = image_multitask_suite(config.n_train, config.seed, config.shape[-1], config.classes,
                                        config.n_test)
    elif config.kind == "idx":
        dataset = load_idx_dataset(config.path)
    elif config.kind == "manifest":
        manifest = load_manifest(config.path)
        dataset = load_idx_dataset(manifest["path"], name=os.path.basename(config.path))
        if manifest["fraction"] < 1.0:
            dataset = dataset.subsample(manifest["fraction"], manifest["seed"])
    else:
        raise ValueError(f"未知数据集类型 {config.kind}")
    if config.fraction < 1.0:
        dataset = dataset.subsample(config.fraction, config.seed)
    logger.info(f"📊 数据集 {dataset.name}: 训练 {len(dataset.x_train)} / 测试 {len(dataset.x_test)}")
    return dataset
