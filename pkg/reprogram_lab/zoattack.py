"""
黑盒重编程

单边平均零阶梯度估计、通过查询通道驱动的训练循环（账号被封禁时轮换账号），
以及用代理模型上的白盒程序初始化后少量查询微调。
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from reprogram_lab.config import DEFAULT_MU
from reprogram_lab.data import LabeledDataset
from reprogram_lab.errors import AttackAbortedError, BlockedAccountError, ConfigError
from reprogram_lab.extensions import progress
from reprogram_lab.models import QueryChannel
from reprogram_lab.numkernel import SeedLike, Tensor, make_rng
from reprogram_lab.reprogram import (AdversarialProgram, ReprogramResult, ReprogramTask, apply_program,
                                     batch_slices, chain_to_w, focal_loss, mlm_score)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["query_index", "account", "epoch", "batch", "purpose", "loss"]


@dataclass(frozen=True)
class ZOConfig:
    """q 个方向、平滑参数 μ、缩放 b（缺省为采样空间维数）"""

    q: int = 30
    mu: float = DEFAULT_MU
    b: Optional[float] = None
    mask_directions: bool = False

    def __post_init__(self):
        if self.q < 1:
            raise ConfigError(f"q 必须 >= 1: {self.q}")
        if not self.mu > 0:
            raise ConfigError(f"μ 必须为正: {self.mu}")
        if self.b is not None and not self.b > 0:
            raise ConfigError(f"b 必须为正: {self.b}")

    def scale(self, dim: int) -> float:
        return float(self.b) if self.b is not None else float(dim)


@dataclass
class AttackBudget:
    accounts_used: int = 0
    queries: int = 0
    detections: int = 0
    estimator_calls: int = 0
    estimator_queries: int = 0
    eval_queries: int = 0


class AttackTrace:
    """逐查询的攻击轨迹，可导出为 CSV"""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.rows: List[tuple] = []
        self._index = 0

    def record(self, account: int, epoch: int, batch: int, purpose: str, loss: float) -> None:
        if self.enabled:
            self.rows.append((self._index, account, epoch, batch, purpose, loss))
        self._index += 1

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


class AccountPool:
    """攻击者的账号序列：当前账号被封禁后打开下一个新账号"""

    def __init__(self, channel: QueryChannel, first_account: int = 0, max_accounts: int = 100000,
                 rotate: bool = True):
        if max_accounts < 1:
            raise ConfigError("至少需要一个账号")
        self.channel = channel
        self.first_account = first_account
        self.max_accounts = max_accounts
        self.rotate_enabled = rotate
        self.current = first_account
        self.opened = [first_account]
        self.bans_seen = 0

    def query(self, x: Tensor) -> Tensor:
        return self.channel.predict_scores(self.current, x)

    def rotate(self, partial: Optional[AdversarialProgram] = None) -> int:
        """记录一次封禁并切换到新账号；账号耗尽或未启用轮换时中止攻击"""
        self.bans_seen += 1
        if not self.rotate_enabled or len(self.opened) >= self.max_accounts:
            raise AttackAbortedError(f"账号耗尽：已使用 {len(self.opened)} 个账号", partial)
        self.current = self.opened[-1] + 1
        self.opened.append(self.current)
        logger.info("账号被封禁，切换到新账号 %d", self.current)
        return self.current

    def accounts_used(self) -> List[int]:
        """至少发出过一次查询的账号"""
        return [a for a in self.opened if self.channel.query_count(a) > 0]

    def total_queries(self) -> int:
        return self.channel.total_queries(self.opened)


def sample_unit_directions(dim: int, q: int, seed: SeedLike) -> Tensor:
    """q 个单位球面上的独立均匀方向，形状 (q, dim)"""
    if dim < 1:
        raise ConfigError(f"方向维数必须 >= 1: {dim}")
    draws = make_rng(seed).standard_normal((q, dim))
    norms = np.linalg.norm(draws, axis=1, keepdims=True)
    return draws / np.where(norms > 0.0, norms, 1.0)


def estimate_gradient(loss_fn: Callable[[Tensor], float], x: Tensor, cfg: ZOConfig, seed: SeedLike,
                      support: Optional[Tensor] = None) -> Tensor:
    """ĝ = (b/(qμ))·Σ_j [ℓ(x+μu_j) − ℓ(x)]·u_j；基线损失只计算一次

    support 非空且启用 mask_directions 时，方向只在 support 为 1 的坐标上采样。
    """
    rng = make_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if cfg.mask_directions and support is not None:
        coords = np.flatnonzero(np.asarray(support).reshape(-1))
    else:
        coords = np.arange(x.size)
    directions = sample_unit_directions(coords.size, cfg.q, rng)
    baseline = loss_fn(x)
    flat_x = x.reshape(-1)
    grad = np.zeros(x.size)
    for u in directions:
        step = np.zeros(x.size)
        step[coords] = u
        perturbed = (flat_x + cfg.mu * step).reshape(x.shape)
        grad[coords] += (loss_fn(perturbed) - baseline) * u
    return (cfg.scale(coords.size) / (cfg.q * cfg.mu) * grad).reshape(x.shape)


def zo_estimate_gradient(channel: QueryChannel, account: int, x_i: Tensor, prog: AdversarialProgram,
                         task: ReprogramTask, y_i: int, cfg: ZOConfig, seed: SeedLike) -> Tensor:
    """在已编程输入 x_i + δ 处估计单个样本的梯度，恰好发出 q+1 次查询"""
    programmed = apply_program(x_i, prog, task.padding)

    def loss_fn(z: Tensor) -> float:
        return focal_loss(mlm_score(channel.predict_scores(account, z), task.mapping, y_i), task.focal)

    return estimate_gradient(loss_fn, programmed, cfg, seed, support=prog.M)


class _SampleLoss:
    """单个样本的查询损失；第一次调用是基线，其余为扰动方向"""

    def __init__(self, pool: AccountPool, task: ReprogramTask, label: int, trace: AttackTrace,
                 epoch: int, batch: int):
        self.pool = pool
        self.task = task
        self.label = label
        self.trace = trace
        self.epoch = epoch
        self.batch = batch
        self.calls = 0

    def __call__(self, z: Tensor) -> float:
        account = self.pool.current
        scores = self.pool.query(z)
        loss = focal_loss(mlm_score(scores, self.task.mapping, self.label), self.task.focal)
        self.trace.record(account, self.epoch, self.batch, "baseline" if self.calls == 0 else "direction", loss)
        self.calls += 1
        return loss


def _query_loss(pool: AccountPool, prog: AdversarialProgram, ds: LabeledDataset, task: ReprogramTask,
                trace: AttackTrace, epoch: int, budget: AttackBudget) -> float:
    """通过查询计算整个数据集上的平均损失（轮末评估）"""
    losses = []
    for i in range(len(ds)):
        z = apply_program(ds.samples[i], prog, task.padding)
        while True:
            try:
                account = pool.current
                scores = pool.query(z)
                break
            except BlockedAccountError:
                pool.rotate(prog)
        loss = focal_loss(mlm_score(scores, task.mapping, int(ds.labels[i])), task.focal)
        trace.record(account, epoch, -1, "eval", loss)
        budget.eval_queries += 1
        losses.append(loss)
    return float(np.mean(losses))


def blackbox_reprogram(channel: QueryChannel, train: LabeledDataset, task: ReprogramTask, eta: float,
                       epochs: int, batch_size: int, cfg: ZOConfig, seed: SeedLike,
                       pool: Optional[AccountPool] = None, init: Optional[AdversarialProgram] = None,
                       raw_input_update: bool = False, track_best: bool = True,
                       trace: Optional[AttackTrace] = None) -> Tuple[ReprogramResult, AttackBudget]:
    """黑盒重编程：梯度由零阶估计给出，其余与白盒训练循环相同

    每轮结束时通过查询计算训练集损失并保留最优程序（track_best=False 时跳过，返回最终程序）。
    """
    rng = make_rng(seed)
    pool = pool or AccountPool(channel)
    trace = trace or AttackTrace(enabled=False)
    budget = AttackBudget()
    prog = init.copy() if init is not None else AdversarialProgram.initial(task.mask(), rng)
    result = ReprogramResult(prog.copy(), np.inf, None)

    try:
        for epoch in progress(range(epochs), desc=f"黑盒重编程 q={cfg.q}", total=epochs):
            order = rng.permutation(len(train))
            for b, window in enumerate(batch_slices(len(train), batch_size)):
                idx = order[window]
                grads = []
                for i in idx:
                    programmed = apply_program(train.samples[i], prog, task.padding)
                    while True:
                        loss_fn = _SampleLoss(pool, task, int(train.labels[i]), trace, epoch, b)
                        try:
                            grads.append(estimate_gradient(loss_fn, programmed, cfg, rng, support=prog.M))
                            break
                        except BlockedAccountError:
                            pool.rotate(prog)
                    budget.estimator_calls += 1
                    budget.estimator_queries += cfg.q + 1
                g = np.mean(grads, axis=0)
                prog = AdversarialProgram(prog.W - eta * chain_to_w(g, prog, raw_input_update), prog.M)
            if track_best:
                epoch_loss = _query_loss(pool, prog, train, task, trace, epoch, budget)
                if epoch_loss < result.best_loss:
                    result.program = prog.copy()
                    result.best_loss = epoch_loss
                result.epoch_losses.append(epoch_loss)
                result.best_curve.append(result.best_loss)
            else:
                result.program = prog.copy()
    except AttackAbortedError as e:
        e.partial = result.program if np.isfinite(result.best_loss) else prog
        _close_budget(budget, pool)
        logger.warning("黑盒攻击中止: %s（已发出 %d 次查询）", e, budget.queries)
        raise

    _close_budget(budget, pool)
    logger.info("黑盒重编程完成: q=%d, Q=%d, 账号数=%d", cfg.q, budget.queries, budget.accounts_used)
    return result, budget


def _close_budget(budget: AttackBudget, pool: AccountPool) -> None:
    budget.queries = pool.total_queries()
    budget.accounts_used = len(pool.accounts_used())
    budget.detections = pool.bans_seen


def finetune_from_surrogate(surrogate_prog: AdversarialProgram, channel: QueryChannel, train: LabeledDataset,
                            task: ReprogramTask, eta: float, epochs: int, batch_size: int, cfg: ZOConfig,
                            seed: SeedLike, pool: Optional[AccountPool] = None,
                            raw_input_update: bool = False,
                            trace: Optional[AttackTrace] = None) -> Tuple[ReprogramResult, AttackBudget]:
    """以代理模型上得到的程序初始化 W，再用少量查询微调"""
    if surrogate_prog.W.shape != task.mask().shape:
        raise ConfigError(f"代理程序形状 {surrogate_prog.W.shape} 与任务不一致")
    result, budget = blackbox_reprogram(channel, train, task, eta, epochs, batch_size, cfg, seed,
                                        pool=pool, init=surrogate_prog, raw_input_update=raw_input_update,
                                        trace=trace)
    if epochs == 0:
        result.program = surrogate_prog.copy()
    return result, budget


def queries_per_test_set(q: int, n: int) -> int:
    """(q+1)·n：按测试集大小折算的查询数，与真实计数并列报告"""
    return (q + 1) * n
