"""
相似度编码器

孪生网络共享一座塔：样本对距离为嵌入差的 L2 范数，用对比损失训练，
检测器通过 embed 使用训练好的编码器。
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from reprogram_lab.data import PairDataset
from reprogram_lab.database import load_weights, save_weights
from reprogram_lab.errors import ConfigError, ShapeError, TrainingError
from reprogram_lab.extensions import progress
from reprogram_lab.numkernel import (FeedforwardNet, OptimizerState, SeedLike, Tensor, build_mlp, make_rng,
                                     net_from_tensors, net_to_tensors, optimizer_step)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveSpec:
    margin: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin <= 0:
            raise ConfigError(f"对比损失的 margin 必须是有限正数: {self.margin}")


@dataclass
class EncoderArch:
    hidden: Sequence[int] = (256,)
    embed_dim: int = 32


@dataclass
class EncoderOptim:
    kind: str = "rmsprop"
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 1e-6


class SimilarityEncoder:
    def __init__(self, net: FeedforwardNet, margin: float = 1.0,
                 history: Optional[List[Dict[str, float]]] = None, seed: Optional[int] = None):
        if net.output_size < 1 or net.is_classifier:
            raise ShapeError("编码器必须输出非空且未经 softmax 的嵌入")
        self.net = net
        self.margin = margin
        self.history = history or []
        self.seed = seed

    @property
    def embed_dim(self) -> int:
        return self.net.output_size

    @property
    def input_dims(self) -> Tuple[int, ...]:
        return self.net.input_dims


def build_encoder_net(input_dims: Sequence[int], arch: EncoderArch, seed: SeedLike) -> FeedforwardNet:
    """flatten → [affine → relu]* → affine(e)"""
    if arch.embed_dim < 1:
        raise ConfigError("嵌入维数必须 >= 1")
    return build_mlp(tuple(input_dims), arch.hidden, arch.embed_dim, seed, softmax=False)


def embed(enc: SimilarityEncoder, x: Tensor) -> Tensor:
    return enc.net.forward(x)


def pair_distance(enc: SimilarityEncoder, x1: Tensor, x2: Tensor) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ShapeError(f"样本对形状不一致: {x1.shape} vs {x2.shape}")
    return float(np.linalg.norm(embed(enc, x1) - embed(enc, x2)))


def contrastive_terms(distance: Tensor, label: Tensor, spec: ContrastiveSpec) -> Tuple[Tensor, Tensor]:
    """(同类项 (1−l)·½DS², 异类项 l·½max(0, z−DS)²)"""
    distance = np.asarray(distance, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    similar = (1.0 - label) * 0.5 * distance ** 2
    dissimilar = label * 0.5 * np.maximum(0.0, spec.margin - distance) ** 2
    return similar, dissimilar


def contrastive_loss(enc: SimilarityEncoder, pair: Tuple[Tensor, Tensor], label: int,
                     spec: ContrastiveSpec) -> float:
    if label not in (0, 1):
        raise ValueError(f"样本对标签必须是 0 或 1: {label}")
    similar, dissimilar = contrastive_terms(pair_distance(enc, pair[0], pair[1]), label, spec)
    return float(similar + dissimilar)


def pair_distances(enc: SimilarityEncoder, pairs: PairDataset) -> Tensor:
    return np.linalg.norm(embed(enc, pairs.left) - embed(enc, pairs.right), axis=1)


def total_contrastive_loss(enc: SimilarityEncoder, pairs: PairDataset, spec: ContrastiveSpec) -> float:
    """样本对集合上的总损失（逐对求和）"""
    similar, dissimilar = contrastive_terms(pair_distances(enc, pairs), pairs.labels, spec)
    return float(np.sum(similar + dissimilar))


def loss_and_grads(net: FeedforwardNet, left: Tensor, right: Tensor, labels: Tensor, spec: ContrastiveSpec,
                   weight_decay: float = 0.0) -> Tuple[float, List[Tensor]]:
    """批次上求和的对比损失加 L2 项 wd/2·‖θ‖²，以及对参数的梯度"""
    e1, caches1, _ = net.forward_cached(left)
    e2, caches2, _ = net.forward_cached(right)
    diff = e1 - e2
    distance = np.linalg.norm(diff, axis=1)
    labels = np.asarray(labels, dtype=np.float64)
    similar, dissimilar = contrastive_terms(distance, labels, spec)
    params = net.parameters()
    loss = float(np.sum(similar + dissimilar)) + 0.5 * weight_decay * sum(float(np.sum(p * p)) for p in params)

    hinge = np.maximum(0.0, spec.margin - distance)
    safe = np.where(distance > 0.0, distance, 1.0)
    coeff = np.where(labels == 0.0, 1.0, np.where(distance > 0.0, -hinge / safe, 0.0))
    grad_diff = coeff[:, None] * diff
    grads1, _ = net.backward(caches1, grad_diff)
    grads2, _ = net.backward(caches2, -grad_diff)
    grads = [g1 + g2 + weight_decay * p for g1, g2, p in zip(grads1, grads2, params)]
    return loss, grads


def mean_pair_distances(enc: SimilarityEncoder, pairs: PairDataset) -> Tuple[float, float]:
    distance = pair_distances(enc, pairs)
    similar = distance[pairs.labels == 0]
    dissimilar = distance[pairs.labels == 1]
    return (float(similar.mean()) if similar.size else float("nan"),
            float(dissimilar.mean()) if dissimilar.size else float("nan"))


def train_encoder(pairs: PairDataset, arch: Optional[EncoderArch] = None, optim: Optional[EncoderOptim] = None,
                  spec: Optional[ContrastiveSpec] = None, seed: int = 0) -> SimilarityEncoder:
    """单塔同时处理样本对的两侧（权重共享），按 epoch 记录损失与平均距离"""
    if len(pairs) == 0:
        raise ConfigError("编码器训练需要非空的样本对集合")
    arch = arch or EncoderArch()
    optim = optim or EncoderOptim()
    spec = spec or ContrastiveSpec()
    rng = make_rng(seed)
    net = build_encoder_net(pairs.left.shape[1:], arch, rng)
    state = OptimizerState(kind=optim.kind, lr=optim.lr)
    params = net.parameters()
    history: List[Dict[str, float]] = []

    for epoch in progress(range(optim.epochs), desc="训练相似度编码器", total=optim.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(pairs), optim.batch_size):
            idx = order[start:start + optim.batch_size]
            loss, grads = loss_and_grads(net, pairs.left[idx], pairs.right[idx], pairs.labels[idx], spec,
                                         optim.weight_decay)
            if not np.isfinite(loss):
                raise TrainingError(f"编码器训练在第 {epoch + 1} 轮发散（loss={loss}）")
            state, params = optimizer_step(state, params, grads)
            net = net.with_parameters(params)
            total += loss
        enc = SimilarityEncoder(net, spec.margin)
        similar, dissimilar = mean_pair_distances(enc, pairs)
        history.append({"epoch": epoch + 1, "loss": total, "similar_distance": similar,
                        "dissimilar_distance": dissimilar})
        logger.debug("编码器 epoch %d: loss=%.4f 同类距离=%.4f 异类距离=%.4f", epoch + 1, total, similar, dissimilar)

    logger.info("相似度编码器训练完成: seed=%d, e=%d", seed, arch.embed_dim)
    return SimilarityEncoder(net, spec.margin, history, seed)


def encoder_pair_accuracy(enc: SimilarityEncoder, pairs: PairDataset, spec: ContrastiveSpec) -> float:
    """DS < z/2 判为同类，统计判对的比例"""
    if len(pairs) == 0:
        raise ValueError("空样本对集合的准确率无定义")
    predicted_similar = pair_distances(enc, pairs) < spec.margin / 2.0
    return float(np.mean(predicted_similar == (pairs.labels == 0)))


def write_encoder_history(path: str, enc: SimilarityEncoder) -> None:
    columns = ["epoch", "loss", "similar_distance", "dissimilar_distance"]
    pd.DataFrame(enc.history, columns=columns).to_csv(path, index=False)


def save_encoder(path: str, enc: SimilarityEncoder) -> None:
    tensors = net_to_tensors(enc.net)
    tensors["meta.margin"] = np.array([enc.margin])
    save_weights(path, tensors)


def load_encoder(path: str) -> SimilarityEncoder:
    tensors = load_weights(path)
    margin = float(tensors["meta.margin"][0]) if "meta.margin" in tensors else 1.0
    return SimilarityEncoder(net_from_tensors(tensors), margin)
