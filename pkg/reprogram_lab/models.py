import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from reprogram_lab.data import LabeledDataset, split_dataset
from reprogram_lab.database import load_weights, save_weights
from reprogram_lab.errors import BlockedAccountError, ShapeError, TrainingError
from reprogram_lab.extensions import progress
from reprogram_lab.numkernel import (FeedforwardNet, OptimizerState, Tensor, build_mlp, make_rng,
                                     net_from_tensors, net_to_tensors, optimizer_step)

logger = logging.getLogger(__name__)


@dataclass
class ArchConfig:
    """源分类器结构与训练配置；hidden 多一层即得到“不同架构”的代理模型"""

    hidden: Sequence[int] = (512,)
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "rmsprop"
    holdout: float = 0.2


@dataclass
class TrainingMetadata:
    seed: int
    epochs: int
    final_accuracy: float
    history: List[Dict[str, float]] = field(default_factory=list)


class Classifier:
    """源域分类器 f(·, θ)：输出 s 维置信度向量"""

    def __init__(self, net: FeedforwardNet, num_classes: int, metadata: Optional[TrainingMetadata] = None):
        if not net.is_classifier or net.output_size != num_classes:
            raise ShapeError("分类器网络必须以 softmax 结尾且输出 num_classes 维")
        self.net = net
        self.num_classes = num_classes
        self.metadata = metadata

    @property
    def input_dims(self) -> Tuple[int, ...]:
        return self.net.input_dims

    @property
    def input_size(self) -> int:
        return self.net.input_dims[0]

    def predict_proba(self, x: Tensor) -> Tensor:
        """实验者视角的直接前向计算，不经过查询通道"""
        return self.net.forward(x)


@dataclass(frozen=True)
class QueryRecord:
    account: int
    sequence_index: int
    input: Tensor


class QueryObserver(Protocol):
    def notify(self, record: QueryRecord) -> bool:
        """接收一条查询记录；返回 True 表示该账号应被封禁"""
        ...


class QueryChannel:
    """模型即服务的查询入口：计数、通知观察者、执行封禁"""

    def __init__(self, target: Classifier, observer: Optional[QueryObserver] = None, keep_history: bool = False):
        self.target = target
        self.observer = observer
        self.keep_history = keep_history
        self._counters: Dict[int, int] = {}
        self._blocked: set = set()
        self._history: Dict[int, List[QueryRecord]] = {}
        self._account_locks: Dict[int, threading.Lock] = {}
        self._lock = threading.Lock()

    def _account_lock(self, account: int) -> threading.Lock:
        with self._lock:
            return self._account_locks.setdefault(account, threading.Lock())

    def predict_scores(self, account: int, x: Tensor) -> Tensor:
        """返回 softmax 置信度；被封禁的账号在模型计算之前即失败"""
        with self._account_lock(account):
            if account in self._blocked:
                raise BlockedAccountError(account)
            x = np.asarray(x, dtype=np.float64)
            if x.shape != self.target.input_dims:
                raise ShapeError(f"查询形状 {x.shape} 与模型输入 {self.target.input_dims} 不匹配")
            index = self._counters.get(account, 0)
            self._counters[account] = index + 1
            scores = self.target.net.forward(x)
            record = QueryRecord(account, index, x)
            if self.keep_history:
                self._history.setdefault(account, []).append(record)
            if self.observer is not None and self.observer.notify(record):
                self._blocked.add(account)
                logger.info("账号 %d 在第 %d 次查询后被封禁", account, index + 1)
            return scores

    def query_count(self, account: int) -> int:
        return self._counters.get(account, 0)

    def total_queries(self, accounts: Optional[Sequence[int]] = None) -> int:
        if accounts is None:
            return sum(self._counters.values())
        return sum(self.query_count(a) for a in accounts)

    def is_blocked(self, account: int) -> bool:
        return account in self._blocked

    def history(self, account: int) -> List[QueryRecord]:
        return list(self._history.get(account, []))

    def accounts(self) -> List[int]:
        return sorted(self._counters)


def predict_scores(ch: QueryChannel, account: int, x: Tensor) -> Tensor:
    return ch.predict_scores(account, x)


def _cross_entropy_grad(probs: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """平均交叉熵及其对 softmax 输出的梯度"""
    n = len(labels)
    picked = np.maximum(probs[np.arange(n), labels], 1e-300)
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (n * picked)
    return float(-np.mean(np.log(picked))), grad


def accuracy(clf: Classifier, ds: LabeledDataset) -> float:
    """argmax 预测正确的比例；空数据集的准确率无定义"""
    if len(ds) == 0:
        raise ValueError("空数据集的准确率无定义")
    if ds.num_classes > clf.num_classes:
        raise ValueError(f"数据集类别数 {ds.num_classes} 超过分类器输出 {clf.num_classes}")
    probs = clf.predict_proba(ds.samples)
    return float(np.mean(np.argmax(probs, axis=1) == ds.labels))


def train_source_classifier(ds: LabeledDataset, arch: Optional[ArchConfig] = None, seed: int = 0) -> Classifier:
    """在源域数据集上训练分类器，报告留出集准确率"""
    arch = arch or ArchConfig()
    rng = make_rng(seed)
    if len(ds) >= 5 and arch.holdout > 0:
        n_train = max(1, int(round(len(ds) * (1.0 - arch.holdout))))
        train, held_out = split_dataset(ds, n_train, rng)
    else:
        train, held_out = ds, ds
    if len(held_out) == 0:
        held_out = train

    net = build_mlp(ds.dims, arch.hidden, ds.num_classes, rng)
    state = OptimizerState(kind=arch.optimizer, lr=arch.lr)
    params = net.parameters()
    history: List[Dict[str, float]] = []

    for epoch in progress(range(arch.epochs), desc="训练源分类器", total=arch.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), arch.batch_size):
            idx = order[start:start + arch.batch_size]
            probs, caches, _ = net.forward_cached(train.samples[idx])
            loss, grad = _cross_entropy_grad(probs, train.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"源分类器训练在第 {epoch} 轮发散（loss={loss}）")
            param_grads, _ = net.backward(caches, grad)
            state, params = optimizer_step(state, params, param_grads)
            net = net.with_parameters(params)
            losses.append(loss)
        clf = Classifier(net, ds.num_classes)
        acc = accuracy(clf, held_out)
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else 0.0, "accuracy": acc})
        logger.debug("源分类器 epoch %d: loss=%.4f acc=%.4f", epoch + 1, history[-1]["loss"], acc)

    final = accuracy(Classifier(net, ds.num_classes), held_out)
    logger.info("源分类器训练完成: seed=%d, 留出准确率 %.2f%%", seed, 100 * final)
    return Classifier(net, ds.num_classes, TrainingMetadata(seed, arch.epochs, final, history))


def save_classifier(path: str, clf: Classifier) -> None:
    tensors = net_to_tensors(clf.net)
    meta = clf.metadata
    tensors["meta.num_classes"] = np.array([clf.num_classes], dtype=np.float64)
    if meta is not None:
        tensors["meta.training"] = np.array([meta.seed, meta.epochs, meta.final_accuracy], dtype=np.float64)
    save_weights(path, tensors)


def load_classifier(path: str) -> Classifier:
    tensors = load_weights(path)
    net = net_from_tensors(tensors)
    num_classes = int(tensors["meta.num_classes"][0])
    meta = None
    if "meta.training" in tensors:
        seed, epochs, acc = tensors["meta.training"]
        meta = TrainingMetadata(int(seed), int(epochs), float(acc))
    return Classifier(net, num_classes, meta)


def write_training_log(path: str, history: List[Dict[str, Any]]) -> None:
    """训练日志 CSV：epoch, loss, accuracy"""
    pd.DataFrame(history, columns=["epoch", "loss", "accuracy"]).to_csv(path, index=False)
