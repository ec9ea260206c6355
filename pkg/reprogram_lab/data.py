"""
合成数据

确定性地生成源域（大图、s 类）与目标域（小图、t 类）数据集，
构造编码器训练用的样本对，并负责数据集的持久化。
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from reprogram_lab.database import decode_dataset, encode_dataset
from reprogram_lab.errors import ConfigError, ShapeError
from reprogram_lab.numkernel import SeedLike, Tensor, make_rng

# 超过该数量的候选对改用拒绝采样，避免枚举全部样本对
_ENUMERATE_LIMIT = 2_000_000


@dataclass
class LabeledDataset:
    """带标签的数据集：samples 形状 (n, d, d, c)，取值 [-1, 1]"""

    samples: Tensor
    labels: np.ndarray
    num_classes: int
    domain: str = "source"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ShapeError("样本数与标签数不一致")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("标签超出 [0, num_classes) 范围")
        if self.domain not in ("source", "target"):
            raise ValueError(f"未知的域标记: {self.domain}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.samples[indices], self.labels[indices], self.num_classes, self.domain)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class PairDataset:
    """样本对：l=0 表示同类（相似），l=1 表示异类（不相似）"""

    left: Tensor
    right: Tensor
    labels: np.ndarray
    left_index: np.ndarray
    right_index: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray) -> "PairDataset":
        return PairDataset(self.left[indices], self.right[indices], self.labels[indices],
                           self.left_index[indices], self.right_index[indices])


@dataclass(frozen=True)
class PaddingSpec:
    """目标样本（d'×d'）居中嵌入 d×d 画框"""

    inner: int
    outer: int
    channels: int = 3

    @property
    def offset(self) -> int:
        return (self.outer - self.inner) // 2

    def validate(self) -> None:
        if self.inner >= self.outer:
            raise ConfigError(f"内尺寸 d'={self.inner} 必须小于外尺寸 d={self.outer}")

    def mask(self) -> Tensor:
        """画框为 1，目标样本区域（所有通道）为 0"""
        self.validate()
        m = np.ones((self.outer, self.outer, self.channels))
        o = self.offset
        m[o:o + self.inner, o:o + self.inner, :] = 0.0
        return m

    def pad(self, x: Tensor) -> Tensor:
        """零填充；支持单个样本或带批次维的样本"""
        self.validate()
        x = np.asarray(x, dtype=np.float64)
        inner_dims = (self.inner, self.inner, self.channels)
        if x.shape[-3:] != inner_dims or x.ndim not in (3, 4):
            raise ShapeError(f"目标样本形状 {x.shape} 与 {inner_dims} 不匹配")
        o = self.offset
        out = np.zeros(x.shape[:-3] + (self.outer, self.outer, self.channels))
        out[..., o:o + self.inner, o:o + self.inner, :] = x
        return out


def pad_and_mask(x: Tensor, spec: PaddingSpec) -> Tuple[Tensor, Tensor]:
    return spec.pad(x), spec.mask()


def gen_source_dataset(seed: int, s: int, per_class: int, d: int, c: int = 3,
                       noise: float = 0.25) -> LabeledDataset:
    """源域：类相关的 Gabor 式条纹（方向/频率/相位/包络中心），加性高斯噪声"""
    if s < 2:
        raise ConfigError(f"源域类别数必须 >= 2，收到 {s}")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:d, 0:d] / float(d)
    n_orient = max(1, (s + 1) // 2)
    samples = []
    for k in range(s):
        theta = np.pi * (k % n_orient) / n_orient
        freq = 2.0 + 2.0 * (k // n_orient)
        phase = 0.7 * k
        cx = 0.5 + 0.2 * np.cos(2 * np.pi * k / s)
        cy = 0.5 + 0.2 * np.sin(2 * np.pi * k / s)
        envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.3 ** 2))
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        gains = 0.6 + 0.4 * np.cos(2 * np.pi * k / s + 2 * np.pi * np.arange(c) / c)
        template = 0.8 * (envelope * wave)[:, :, None] * gains[None, None, :]
        amplitude = 1.0 + 0.1 * rng.standard_normal(per_class)
        batch = amplitude[:, None, None, None] * template[None] + noise * rng.standard_normal((per_class, d, d, c))
        samples.append(batch)
    labels = np.repeat(np.arange(s), per_class)
    x = np.clip(np.concatenate(samples) if samples else np.zeros((0, d, d, c)), -1.0, 1.0)
    order = rng.permutation(len(labels))
    return LabeledDataset(x[order], labels[order], s, "source")


def gen_target_dataset(seed: int, t: int, per_class: int, d_inner: int, c: int = 3,
                       noise: float = 0.1) -> LabeledDataset:
    """目标域：第 j 类含 j+1 个高斯斑点，叠加 j+1 周期的随机相位纹理"""
    if t < 1:
        raise ConfigError("目标域类别数必须 >= 1")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:d_inner, 0:d_inner].astype(np.float64)
    sigma = max(d_inner / 8.0, 0.5)
    lo, hi = 1.5 * sigma, d_inner - 1 - 1.5 * sigma
    if hi < lo:
        lo = hi = (d_inner - 1) / 2.0
    samples = []
    for j in range(t):
        for _ in range(per_class):
            img = np.full((d_inner, d_inner), -0.5)
            centers = rng.uniform(lo, hi, size=(j + 1, 2))
            for cy, cx in centers:
                img += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
            texture = 0.15 * np.cos(2 * np.pi * (j + 1) * xx / d_inner + rng.uniform(0, 2 * np.pi))
            x = (img + texture)[:, :, None] + noise * rng.standard_normal((d_inner, d_inner, c))
            samples.append(x)
    labels = np.repeat(np.arange(t), per_class)
    x = np.clip(np.array(samples) if samples else np.zeros((0, d_inner, d_inner, c)), -1.0, 1.0)
    order = rng.permutation(len(labels))
    return LabeledDataset(x[order], labels[order], t, "target")


def split_dataset(ds: LabeledDataset, n_first: int, seed: SeedLike) -> Tuple[LabeledDataset, LabeledDataset]:
    """随机划分为 (前 n_first 个, 其余)"""
    if n_first > len(ds):
        raise ConfigError(f"划分大小 {n_first} 超过数据集大小 {len(ds)}")
    order = make_rng(seed).permutation(len(ds))
    return ds.subset(order[:n_first]), ds.subset(order[n_first:])


def _pair_counts(labels: np.ndarray) -> Tuple[int, int]:
    n = len(labels)
    counts = np.bincount(labels) if n else np.zeros(0, dtype=np.int64)
    similar = int(sum(int(m) * (int(m) - 1) // 2 for m in counts))
    return similar, n * (n - 1) // 2 - similar


def _sample_pairs(labels: np.ndarray, count: int, similar: bool, rng: np.random.Generator) -> np.ndarray:
    """无放回地抽取 count 个不同的 (i<j) 样本对"""
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    n = len(labels)
    if n * (n - 1) // 2 <= _ENUMERATE_LIMIT:
        left, right = np.triu_indices(n, k=1)
        keep = (labels[left] == labels[right]) == similar
        candidates = np.stack([left[keep], right[keep]], axis=1)
        chosen = rng.choice(len(candidates), size=count, replace=False)
        return candidates[np.sort(chosen)]
    seen = set()
    pairs: List[Tuple[int, int]] = []
    while len(pairs) < count:
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        if i == j or (labels[i] == labels[j]) != similar:
            continue
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            pairs.append(key)
    return np.array(pairs, dtype=np.int64)


def make_pairs(ds: LabeledDataset, seed: SeedLike, p: int, balance: float = 0.5) -> PairDataset:
    """构造 p 个样本对，其中比例 balance 为同类对"""
    if len(ds) and ds.class_counts()[np.unique(ds.labels)].min() < 2:
        raise ConfigError("每个类别至少需要 2 个样本")
    n_similar = int(round(p * balance))
    n_dissimilar = p - n_similar
    available_similar, available_dissimilar = _pair_counts(ds.labels)
    if n_similar > available_similar or n_dissimilar > available_dissimilar:
        raise ConfigError(
            f"请求 {n_similar} 个同类对 / {n_dissimilar} 个异类对，"
            f"但仅有 {available_similar} / {available_dissimilar} 个不同的样本对")

    rng = make_rng(seed)
    similar_pairs = _sample_pairs(ds.labels, n_similar, True, rng)
    dissimilar_pairs = _sample_pairs(ds.labels, n_dissimilar, False, rng)
    pairs = np.concatenate([similar_pairs, dissimilar_pairs]).reshape(-1, 2)
    pair_labels = np.concatenate([np.zeros(n_similar, dtype=np.int64), np.ones(n_dissimilar, dtype=np.int64)])
    order = rng.permutation(p)
    pairs, pair_labels = pairs[order], pair_labels[order]
    return PairDataset(ds.samples[pairs[:, 0]], ds.samples[pairs[:, 1]], pair_labels, pairs[:, 0], pairs[:, 1])


def save_dataset(path: str, ds: LabeledDataset) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_dataset(ds.samples, ds.labels, ds.num_classes, ds.domain))


def load_dataset(path: str, expected_dims: Optional[Tuple[int, ...]] = None) -> LabeledDataset:
    with open(path, "rb") as handle:
        samples, labels, num_classes, domain = decode_dataset(handle.read())
    ds = LabeledDataset(samples, labels, num_classes, domain)
    if expected_dims is not None and len(ds) and ds.dims != tuple(expected_dims):
        raise ShapeError(f"数据集样本形状 {ds.dims} 与期望 {expected_dims} 不一致")
    return ds
