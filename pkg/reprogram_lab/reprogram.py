"""
对抗重编程（白盒）

对抗程序 δ = tanh(W)∘M 的参数化、多标签映射（MLM）、focal loss，
以及按 epoch 洗牌、按批次平均梯度、保留最优损失程序的训练循环。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from reprogram_lab.config import DEFAULT_GAMMA
from reprogram_lab.data import LabeledDataset, PaddingSpec
from reprogram_lab.database import load_weights, save_weights
from reprogram_lab.errors import ConfigError, FormatError, InvariantError, NumericError, ShapeError
from reprogram_lab.extensions import progress
from reprogram_lab.models import Classifier
from reprogram_lab.numkernel import SeedLike, Tensor, make_rng

logger = logging.getLogger(__name__)

# 批量输入 (n, d, d, c) → 置信度 (n, s)
Scorer = Callable[[Tensor], Tensor]

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LabelMapping:
    """t 个互不相交、大小相同的源标签组；目标标签 j 的得分为组内置信度均值"""

    groups: Tuple[Tuple[int, ...], ...]
    num_source: int

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(v) for v in g) for g in self.groups))
        if not self.groups:
            raise ConfigError("标签映射至少需要一个目标类别")
        size = len(self.groups[0])
        if size == 0 or any(len(g) != size for g in self.groups):
            raise ConfigError("每个标签组的大小必须相同且非零")
        flat = [v for g in self.groups for v in g]
        if len(set(flat)) != len(flat):
            raise ConfigError("标签组必须两两不相交")
        if min(flat) < 0 or max(flat) >= self.num_source:
            raise ConfigError(f"源标签必须位于 [0, {self.num_source})")

    @classmethod
    def consecutive(cls, s: int, t: int, group_size: int) -> "LabelMapping":
        """按标签顺序每 group_size 个源标签映射到一个目标标签"""
        if t * group_size > s:
            raise ConfigError(f"t·|K| = {t * group_size} 超过源类别数 {s}")
        return cls(tuple(tuple(range(j * group_size, (j + 1) * group_size)) for j in range(t)), s)

    @property
    def num_target(self) -> int:
        return len(self.groups)

    @property
    def group_size(self) -> int:
        return len(self.groups[0])

    def matrix(self) -> Tensor:
        """(s, t) 平均矩阵 A：MLM 得分 = 置信度 @ A"""
        a = np.zeros((self.num_source, self.num_target))
        for j, group in enumerate(self.groups):
            a[list(group), j] = 1.0 / len(group)
        return a

    def scores(self, probs: Tensor) -> Tensor:
        return np.asarray(probs, dtype=np.float64) @ self.matrix()

    def to_csv(self, path: str) -> None:
        rows = [(j, k) for j, group in enumerate(self.groups) for k in group]
        pd.DataFrame(rows, columns=["target_label", "source_label"]).to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str, num_source: int) -> "LabelMapping":
        frame = pd.read_csv(path)
        if list(frame.columns) != ["target_label", "source_label"]:
            raise FormatError(f"标签映射 CSV 表头错误: {list(frame.columns)}")
        groups = [tuple(sub["source_label"].tolist()) for _, sub in frame.groupby("target_label", sort=True)]
        return cls(tuple(groups), num_source)


@dataclass(frozen=True)
class FocalLossSpec:
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"focal loss 的 γ 必须是有限非负数: {self.gamma}")


@dataclass(frozen=True)
class ReprogramTask:
    """一次重编程任务的静态部分：标签映射、填充方式、损失"""

    mapping: LabelMapping
    padding: PaddingSpec
    focal: FocalLossSpec = field(default_factory=FocalLossSpec)

    def mask(self) -> Tensor:
        return self.padding.mask()


@dataclass
class AdversarialProgram:
    W: Tensor
    M: Tensor

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.W.shape != self.M.shape:
            raise ShapeError(f"W{self.W.shape} 与 M{self.M.shape} 形状不一致")

    @classmethod
    def initial(cls, mask: Tensor, seed: SeedLike, scale: float = 0.01) -> "AdversarialProgram":
        """W ~ U[−scale, scale]"""
        rng = make_rng(seed)
        return cls(rng.uniform(-scale, scale, size=mask.shape), mask)

    @property
    def delta(self) -> Tensor:
        return program_delta(self)

    def copy(self) -> "AdversarialProgram":
        return AdversarialProgram(self.W.copy(), self.M.copy())


@dataclass
class ReprogramResult:
    program: AdversarialProgram
    best_loss: float
    initial_loss: Optional[float]
    epoch_losses: List[float] = field(default_factory=list)
    best_curve: List[float] = field(default_factory=list)

    def history(self) -> List[dict]:
        return [{"epoch": i + 1, "loss": loss, "best_loss": best}
                for i, (loss, best) in enumerate(zip(self.epoch_losses, self.best_curve))]


def program_delta(prog: AdversarialProgram) -> Tensor:
    """δ = tanh(W)∘M；每次调用重新计算"""
    if not np.all((prog.M == 0.0) | (prog.M == 1.0)):
        raise InvariantError("重编程掩码必须是二值的")
    return np.tanh(prog.W) * prog.M


def apply_program(x_target: Tensor, prog: AdversarialProgram, spec: PaddingSpec) -> Tensor:
    """零填充目标样本后叠加 δ；支持带批次维的输入"""
    padded = spec.pad(x_target)
    if padded.shape[-3:] != prog.W.shape:
        raise ShapeError(f"填充后的形状 {padded.shape[-3:]} 与程序形状 {prog.W.shape} 不一致")
    return padded + program_delta(prog)


def mlm_score(scores: Tensor, mapping: LabelMapping, y: int) -> float:
    if not 0 <= y < mapping.num_target:
        raise ValueError(f"目标标签 {y} 超出 [0, {mapping.num_target})")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (mapping.num_source,):
        raise ShapeError(f"置信度长度 {scores.shape} 应为 ({mapping.num_source},)")
    return float(np.mean(scores[list(mapping.groups[y])]))


def _clamp_probability(p: Tensor) -> Tensor:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p > 1.0 + 1e-9):
        raise ValueError(f"概率不能大于 1: {np.max(p)}")
    return np.clip(p, _PROB_FLOOR, 1.0)


def focal_loss(p: Union[float, Tensor], spec: FocalLossSpec = FocalLossSpec()) -> Union[float, Tensor]:
    """−(1−p)^γ·ln p，p 下限截断到 1e-12"""
    p = _clamp_probability(p)
    loss = -np.power(1.0 - p, spec.gamma) * np.log(p)
    return float(loss) if loss.ndim == 0 else loss


def focal_loss_grad(p: Union[float, Tensor], spec: FocalLossSpec = FocalLossSpec()) -> Tensor:
    """dℓ/dp = γ(1−p)^{γ−1}·ln p − (1−p)^γ / p"""
    p = _clamp_probability(p)
    gamma = spec.gamma
    one_minus = 1.0 - p
    if gamma == 0.0:
        first = np.zeros_like(p)
    else:
        safe = np.where(one_minus > 0.0, one_minus, 1.0)
        first = np.where(one_minus > 0.0, gamma * np.power(safe, gamma - 1.0) * np.log(p), 0.0)
    return first - np.power(one_minus, gamma) / p


def _score_batch(model: Union[Classifier, Scorer], xs: Tensor) -> Tensor:
    if isinstance(model, Classifier):
        return model.predict_proba(xs)
    return np.asarray(model(xs), dtype=np.float64)


def reprogram_loss(prog: AdversarialProgram, batch: LabeledDataset, task: ReprogramTask,
                   model: Union[Classifier, Scorer]) -> float:
    """批次上的平均 focal loss"""
    if len(batch) == 0:
        raise ValueError("重编程损失需要非空批次")
    probs = _score_batch(model, apply_program(batch.samples, prog, task.padding))
    p = task.mapping.scores(probs)[np.arange(len(batch)), batch.labels]
    return float(np.mean(focal_loss(p, task.focal)))


def chain_to_w(grad_x: Tensor, prog: AdversarialProgram, raw_input_update: bool = False) -> Tensor:
    """输入梯度 → W 的梯度：g∘M∘(1 − tanh²W)；raw 模式直接使用 g"""
    if raw_input_update:
        return grad_x
    return grad_x * prog.M * (1.0 - np.tanh(prog.W) ** 2)


def loss_and_grad(prog: AdversarialProgram, batch: LabeledDataset, task: ReprogramTask,
                  clf: Classifier) -> Tuple[float, Tensor]:
    """白盒：平均损失及其对（共享的）程序输入的梯度 (1/B)·Σ g_i"""
    n = len(batch)
    if n == 0:
        raise ValueError("重编程损失需要非空批次")
    xs = apply_program(batch.samples, prog, task.padding)
    probs, caches, _ = clf.net.forward_cached(xs)
    a = task.mapping.matrix()
    rows = np.arange(n)
    p = (probs @ a)[rows, batch.labels]
    loss = float(np.mean(focal_loss(p, task.focal)))
    grad_h = np.zeros((n, a.shape[1]))
    grad_h[rows, batch.labels] = focal_loss_grad(p, task.focal) / n
    _, grad_in = clf.net.backward(caches, grad_h @ a.T)
    return loss, grad_in.sum(axis=0).reshape(prog.W.shape)


def batch_slices(n: int, batch_size: int) -> List[slice]:
    """⌊n/B⌋ 个完整批次；n < B 时整个数据集作为一个批次"""
    if n == 0:
        return []
    if n < batch_size:
        return [slice(0, n)]
    return [slice(b * batch_size, (b + 1) * batch_size) for b in range(n // batch_size)]


def whitebox_reprogram(clf: Classifier, train: LabeledDataset, task: ReprogramTask, eta: float,
                       epochs: int, batch_size: int, seed: SeedLike,
                       raw_input_update: bool = False,
                       init: Optional[AdversarialProgram] = None) -> ReprogramResult:
    """白盒重编程：每轮洗牌、批次梯度步、轮末全训练集损失、保留最优程序

    初始程序参与最优比较：若每轮都比初始损失差，返回初始程序。
    """
    rng = make_rng(seed)
    prog = init.copy() if init is not None else AdversarialProgram.initial(task.mask(), rng)
    initial_loss = reprogram_loss(prog, train, task, clf)
    result = ReprogramResult(prog.copy(), initial_loss, initial_loss)
    best = initial_loss

    for epoch in progress(range(epochs), desc="白盒重编程", total=epochs):
        order = rng.permutation(len(train))
        for window in batch_slices(len(train), batch_size):
            _, g = loss_and_grad(prog, train.subset(order[window]), task, clf)
            prog = AdversarialProgram(prog.W - eta * chain_to_w(g, prog, raw_input_update), prog.M)
        epoch_loss = reprogram_loss(prog, train, task, clf)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"白盒重编程在第 {epoch + 1} 轮出现非有限损失 {epoch_loss}")
        if epoch_loss < best:
            best = epoch_loss
            result.program = prog.copy()
            result.best_loss = epoch_loss
        result.epoch_losses.append(epoch_loss)
        result.best_curve.append(best)
        logger.debug("白盒 epoch %d: loss=%.5f best=%.5f", epoch + 1, epoch_loss, best)
    return result


def reprogram_accuracy(prog: AdversarialProgram, test: LabeledDataset, task: ReprogramTask,
                       model: Union[Classifier, Scorer]) -> float:
    """argmax_j MLM 得分等于真实目标标签的比例"""
    if len(test) == 0:
        raise ValueError("空数据集的准确率无定义")
    probs = _score_batch(model, apply_program(test.samples, prog, task.padding))
    predicted = np.argmax(task.mapping.scores(probs), axis=1)
    return float(np.mean(predicted == test.labels))


def save_program(path: str, prog: AdversarialProgram) -> None:
    save_weights(path, {"W": prog.W, "M": prog.M})


def load_program(path: str, expected_shape: Optional[Sequence[int]] = None) -> AdversarialProgram:
    tensors = load_weights(path)
    if "W" not in tensors or "M" not in tensors:
        raise FormatError("程序文件必须包含张量 W 与 M")
    prog = AdversarialProgram(tensors["W"], tensors["M"])
    if expected_shape is not None and prog.W.shape != tuple(expected_shape):
        raise ShapeError(f"程序形状 {prog.W.shape} 与期望 {tuple(expected_shape)} 不一致")
    return prog


def write_reprogram_history(path: str, result: ReprogramResult) -> None:
    """训练曲线 CSV：epoch, loss, best_loss"""
    pd.DataFrame(result.history(), columns=["epoch", "loss", "best_loss"]).to_csv(path, index=False)
