"""
实验场景

桌面规模地复现白盒/黑盒对比、检测器对零阶攻击的效果、代理模型初始化后微调、
阈值标定与编码器评估，并以 CSV 或终端表格输出报告。
"""
import logging
import math
import zlib
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from colorama import Fore, Style

from reprogram_lab.config import ScenarioConfig
from reprogram_lab.data import (LabeledDataset, PaddingSpec, gen_source_dataset, gen_target_dataset, make_pairs,
                                split_dataset)
from reprogram_lab.database import ArtifactStore
from reprogram_lab.detector import (CalibrationReport, DetectorConfig, DetectorState, StatefulDetector,
                                    calibrate_threshold, detection_stats, observe_embedding)
from reprogram_lab.encoder import (ContrastiveSpec, EncoderArch, EncoderOptim, SimilarityEncoder, contrastive_loss,
                                   encoder_pair_accuracy, mean_pair_distances, train_encoder)
from reprogram_lab.errors import InvariantError
from reprogram_lab.models import ArchConfig, Classifier, QueryChannel, train_source_classifier
from reprogram_lab.numkernel import (Affine, AveragePool, FeedforwardNet, ReLU, Softmax, Tanh, build_mlp,
                                     finite_diff_check, make_rng, numeric_gradient)
from reprogram_lab.reprogram import (AdversarialProgram, FocalLossSpec, LabelMapping, ReprogramTask, chain_to_w,
                                     loss_and_grad, reprogram_accuracy, reprogram_loss, whitebox_reprogram)
from reprogram_lab.zoattack import (AccountPool, ZOConfig, blackbox_reprogram, finetune_from_surrogate,
                                    queries_per_test_set)

logger = logging.getLogger(__name__)

REPORT_COLUMNS: Dict[str, List[str]] = {
    "whitebox-gap": ["seed", "tr", "ts", "q", "R_t", "BR_t", "gap", "Q", "estimator_Q", "test_set_Q"],
    "zo-detection": ["seed", "q", "BR_t", "Q", "estimator_Q", "test_set_Q", "D", "sigma_star", "accounts"],
    "surrogate-finetune": ["seed", "target_model", "surrogate_model", "R_s", "q", "BR_t", "Q", "estimator_Q",
                           "test_set_Q", "D", "sigma_star", "accounts"],
    "calibrate": ["seed", "k", "target_fpr", "rho", "achieved_fpr"],
    "encoder": ["seed", "d", "pair_accuracy", "similar_distance", "dissimilar_distance"],
    "unit": ["check", "passed", "value"],
}


def derive_seed(seed: int, tag: str) -> int:
    """由运行种子与用途标签派生独立且稳定的子种子"""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode("utf-8"))]).generate_state(1)[0])


class ScenarioReport:
    """一次场景的结果表；列顺序固定

    查询列：Q 是目标模型实际应答的全部查询，含每轮末的训练集评估与被封账号上作废的查询；
    estimator_Q 只计零阶估计，恰为 (q+1) × 估计次数；test_set_Q = (q+1) × |Ts| 是按测试集大小折算的对照值。
    """

    def __init__(self, kind: str, k: Optional[int] = None, rows: Optional[List[Dict[str, Any]]] = None):
        if kind not in REPORT_COLUMNS:
            raise ValueError(f"未知的报告类型: {kind}")
        self.kind = kind
        self.k = k
        self.rows: List[Dict[str, Any]] = list(rows or [])

    @property
    def columns(self) -> List[str]:
        return REPORT_COLUMNS[self.kind]

    def add_row(self, **values: Any) -> None:
        missing = [c for c in self.columns if c not in values]
        if missing:
            raise ValueError(f"报告行缺少列: {missing}")
        self.rows.append({c: values[c] for c in self.columns})

    def extend(self, other: "ScenarioReport") -> "ScenarioReport":
        if other.kind != self.kind:
            raise ValueError(f"不能合并 {self.kind} 与 {other.kind} 报告")
        self.rows.extend(other.rows)
        return self

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def check_invariants(self) -> None:
        """逐行复核 estimator_Q ≤ Q、D ≤ ⌊Q/(k+1)⌋、σ* ∈ [0,1] 以及 σ* 可由 (D, Q, k) 重算"""
        if "estimator_Q" in self.columns:
            for row in self.rows:
                if int(row["estimator_Q"]) > int(row["Q"]):
                    raise InvariantError(f"estimator_Q={row['estimator_Q']} 超过 Q={row['Q']}")
        if "sigma_star" not in self.columns:
            return
        if self.k is None:
            raise InvariantError("含 σ* 的报告必须记录 k")
        for row in self.rows:
            queries, detections, sigma_star = int(row["Q"]), int(row["D"]), float(row["sigma_star"])
            if detections > queries // (self.k + 1):
                raise InvariantError(f"D={detections} 超过 ⌊Q/(k+1)⌋，Q={queries}, k={self.k}")
            if not 0.0 <= sigma_star <= 1.0:
                raise InvariantError(f"σ*={sigma_star} 超出 [0, 1]")
            expected = detection_stats(queries, detections, self.k).sigma_star if queries else 0.0
            if abs(expected - sigma_star) > 1e-9:
                raise InvariantError(f"σ*={sigma_star} 与重算值 {expected} 不一致")


def sigma_star_or_zero(queries: int, detections: int, k: int) -> float:
    """未发出查询的行记 σ* = 0"""
    return detection_stats(queries, detections, k).sigma_star if queries else 0.0


def emit_report(report: ScenarioReport, path: Optional[str] = None, fmt: str = "csv") -> str:
    """csv：固定表头顺序写入 path（缺省返回文本）；console：对齐的彩色表格"""
    frame = report.to_frame()
    if fmt == "csv":
        text = frame.to_csv(index=False, float_format="%.17g")
        if path:
            with open(path, "w", encoding="utf-8", newline="") as handle:
                handle.write(text)
        return text
    if fmt == "console":
        cells = [[_format_cell(v) for v in row] for row in frame.itertuples(index=False)]
        widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(frame.columns)]
        header = "  ".join(c.rjust(w) for c, w in zip(frame.columns, widths))
        lines = [f"{Fore.CYAN}{Style.BRIGHT}{header}{Style.RESET_ALL}"]
        lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
        text = "\n".join(lines)
        if path:
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(text + "\n")
        return text
    raise ValueError(f"未知的报告格式: {fmt}")


def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.4f}"
    return str(value)


def read_report(path: str, kind: str, k: Optional[int] = None) -> ScenarioReport:
    frame = pd.read_csv(path)
    if list(frame.columns) != REPORT_COLUMNS[kind]:
        raise ValueError(f"报告表头与 {kind} 不一致: {list(frame.columns)}")
    return ScenarioReport(kind, k, frame.to_dict(orient="records"))


# ---------------------------------------------------------------- 产物构建

def _signature(cfg: ScenarioConfig, *names: str) -> Tuple[Any, ...]:
    return tuple((n, tuple(v) if isinstance(v, list) else v) for n in names for v in [getattr(cfg, n)])


_DATA_FIELDS = ("d", "d_inner", "channels", "source_classes", "source_per_class", "target_classes",
                "tr_sizes", "ts_size")
_MODEL_FIELDS = ("source_epochs", "source_lr", "source_batch")
_ENCODER_FIELDS = ("embed_dim", "encoder_hidden", "margin", "pairs", "pair_balance", "encoder_epochs",
                   "encoder_lr", "encoder_batch", "weight_decay", "encoder_optimizer")


def source_dataset(cfg: ScenarioConfig, seed: int, tag: str = "source-data") -> LabeledDataset:
    key = (tag, seed) + _signature(cfg, *_DATA_FIELDS)
    return ArtifactStore().get_or_build(key, lambda: gen_source_dataset(
        derive_seed(seed, tag), cfg.source_classes, cfg.source_per_class, cfg.d, cfg.channels))


def source_classifier(cfg: ScenarioConfig, seed: int, hidden: Sequence[int], tag: str) -> Classifier:
    """同一种子与结构的分类器在进程内只训练一次"""
    key = ("classifier", tag, seed, tuple(hidden)) + _signature(cfg, *_DATA_FIELDS, *_MODEL_FIELDS)
    arch = ArchConfig(hidden=tuple(hidden), epochs=cfg.source_epochs, lr=cfg.source_lr, batch_size=cfg.source_batch)
    return ArtifactStore().get_or_build(
        key, lambda: train_source_classifier(source_dataset(cfg, seed), arch, derive_seed(seed, tag)))


def target_splits(cfg: ScenarioConfig, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """(训练池, 测试集 Ts)；各 Tr 取训练池的前缀"""
    needed = max(cfg.tr_sizes) + cfg.ts_size
    per_class = math.ceil(needed / cfg.target_classes)
    full = gen_target_dataset(derive_seed(seed, "target-data"), cfg.target_classes, per_class, cfg.d_inner,
                              cfg.channels)
    test, pool = split_dataset(full, cfg.ts_size, derive_seed(seed, "target-split"))
    return pool, test


def make_task(cfg: ScenarioConfig) -> ReprogramTask:
    mapping = LabelMapping.consecutive(cfg.source_classes, cfg.target_classes, cfg.group_size)
    return ReprogramTask(mapping, PaddingSpec(cfg.d_inner, cfg.d, cfg.channels), FocalLossSpec(cfg.gamma))


def zo_config(cfg: ScenarioConfig, q: int) -> ZOConfig:
    return ZOConfig(q=q, mu=cfg.mu, b=cfg.b, mask_directions=cfg.mask_directions)


def detector_encoder(cfg: ScenarioConfig, seed: int) -> SimilarityEncoder:
    """检测器使用的相似度编码器，输入尺寸为 d"""
    key = ("encoder", seed) + _signature(cfg, *_DATA_FIELDS, *_ENCODER_FIELDS)

    def build() -> SimilarityEncoder:
        pool = source_dataset(cfg, seed, "encoder-data")
        pairs = make_pairs(pool, derive_seed(seed, "encoder-pairs"), cfg.pairs, cfg.pair_balance)
        return train_encoder(
            pairs,
            EncoderArch(hidden=(cfg.encoder_hidden,), embed_dim=cfg.embed_dim),
            EncoderOptim(cfg.encoder_optimizer, cfg.encoder_lr, cfg.encoder_epochs, cfg.encoder_batch,
                         cfg.weight_decay),
            ContrastiveSpec(cfg.margin),
            derive_seed(seed, "encoder-train"))

    return ArtifactStore().get_or_build(key, build)


def calibrated_detector(cfg: ScenarioConfig, seed: int) -> Tuple[DetectorConfig, Optional[CalibrationReport]]:
    """显式给出 rho 时直接使用，否则在良性源域数据上标定"""
    encoder = detector_encoder(cfg, seed)
    if cfg.rho is not None:
        return DetectorConfig(cfg.k, cfg.rho, encoder, cfg.rotate_accounts), None
    benign = source_dataset(cfg, seed, "benign-data")
    report = calibrate_threshold(encoder, benign, cfg.k, cfg.target_fpr, derive_seed(seed, "calibration"))
    return DetectorConfig(cfg.k, report.rho, encoder, cfg.rotate_accounts), report


def _attack(cfg: ScenarioConfig, target: Classifier, detector_cfg: Optional[DetectorConfig], train: LabeledDataset,
            task: ReprogramTask, q: int, seed: int, init: Optional[AdversarialProgram] = None,
            epochs: Optional[int] = None):
    """通过查询通道运行一次黑盒攻击；返回 (结果, 预算, 检测器, 账号池)"""
    detector = StatefulDetector(detector_cfg) if detector_cfg is not None else None
    channel = QueryChannel(target, observer=detector)
    pool = AccountPool(channel, max_accounts=cfg.max_accounts, rotate=cfg.rotate_accounts)
    zo = zo_config(cfg, q)
    if init is None:
        result, budget = blackbox_reprogram(channel, train, task, cfg.eta, cfg.epochs, cfg.batch_size, zo, seed,
                                            pool=pool, raw_input_update=cfg.raw_input_update)
    else:
        result, budget = finetune_from_surrogate(init, channel, train, task, cfg.eta,
                                                 cfg.finetune_epochs if epochs is None else epochs,
                                                 cfg.batch_size, zo, seed, pool=pool,
                                                 raw_input_update=cfg.raw_input_update)
    return result, budget, detector, pool


# ---------------------------------------------------------------- 场景

def run_whitebox_gap(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioReport:
    """每个 Tr：白盒 R_t、黑盒 BR_t 与差值"""
    seed = cfg.require_seed() if seed is None else seed
    target = source_classifier(cfg, seed, cfg.hidden, "model-a")
    pool, test = target_splits(cfg, seed)
    task = make_task(cfg)
    report = ScenarioReport("whitebox-gap")
    for tr in cfg.tr_sizes:
        train = pool.subset(np.arange(tr))
        attack_seed = derive_seed(seed, f"attack-tr{tr}")
        white = whitebox_reprogram(target, train, task, cfg.eta, cfg.epochs, cfg.batch_size, attack_seed,
                                   cfg.raw_input_update)
        r_t = reprogram_accuracy(white.program, test, task, target)
        black, budget, _, _ = _attack(cfg, target, None, train, task, cfg.gap_q, attack_seed)
        br_t = reprogram_accuracy(black.program, test, task, target)
        report.add_row(seed=seed, tr=tr, ts=len(test), q=cfg.gap_q, R_t=r_t, BR_t=br_t, gap=r_t - br_t,
                       Q=budget.queries, estimator_Q=budget.estimator_queries,
                       test_set_Q=queries_per_test_set(cfg.gap_q, len(test)))
        logger.info("Tr=%d: R_t=%.4f BR_t=%.4f", tr, r_t, br_t)
    report.check_invariants()
    return report


def run_zo_detection(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioReport:
    """带标定检测器的直接零阶攻击，遍历 q"""
    seed = cfg.require_seed() if seed is None else seed
    target = source_classifier(cfg, seed, cfg.hidden, "model-a")
    pool, test = target_splits(cfg, seed)
    train = pool.subset(np.arange(max(cfg.tr_sizes)))
    task = make_task(cfg)
    detector_cfg, _ = calibrated_detector(cfg, seed)
    report = ScenarioReport("zo-detection", cfg.k)
    for q in cfg.q_values:
        result, budget, detector, accounts = _attack(cfg, target, detector_cfg, train, task, q,
                                                     derive_seed(seed, f"attack-q{q}"))
        _, detections = detector.totals(accounts.opened)
        report.add_row(seed=seed, q=q, BR_t=reprogram_accuracy(result.program, test, task, target),
                       Q=budget.queries, estimator_Q=budget.estimator_queries,
                       test_set_Q=queries_per_test_set(q, len(test)), D=detections,
                       sigma_star=sigma_star_or_zero(budget.queries, detections, cfg.k),
                       accounts=budget.accounts_used)
    report.check_invariants()
    return report


def run_surrogate_finetune(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioReport:
    """代理模型上白盒训练，再在目标模型上少量查询微调；两种模型互换角色各跑一遍"""
    seed = cfg.require_seed() if seed is None else seed
    models = {
        "A": source_classifier(cfg, seed, cfg.hidden, "model-a"),
        "B": source_classifier(cfg, seed, cfg.surrogate_hidden, "model-b"),
    }
    pool, test = target_splits(cfg, seed)
    train = pool.subset(np.arange(max(cfg.tr_sizes)))
    task = make_task(cfg)
    detector_cfg, _ = calibrated_detector(cfg, seed)
    report = ScenarioReport("surrogate-finetune", cfg.k)
    for target_name, surrogate_name in (("A", "B"), ("B", "A")):
        target, surrogate = models[target_name], models[surrogate_name]
        white = whitebox_reprogram(surrogate, train, task, cfg.eta, cfg.epochs, cfg.batch_size,
                                   derive_seed(seed, f"surrogate-{surrogate_name}"), cfg.raw_input_update)
        r_s = reprogram_accuracy(white.program, test, task, surrogate)
        report.add_row(seed=seed, target_model=target_name, surrogate_model=surrogate_name, R_s=r_s, q=0,
                       BR_t=reprogram_accuracy(white.program, test, task, target), Q=0, estimator_Q=0,
                       test_set_Q=0, D=0, sigma_star=0.0, accounts=0)
        for q in cfg.finetune_q_values:
            result, budget, detector, accounts = _attack(cfg, target, detector_cfg, train, task, q,
                                                         derive_seed(seed, f"finetune-{target_name}-q{q}"),
                                                         init=white.program)
            _, detections = detector.totals(accounts.opened)
            report.add_row(seed=seed, target_model=target_name, surrogate_model=surrogate_name, R_s=r_s, q=q,
                           BR_t=reprogram_accuracy(result.program, test, task, target), Q=budget.queries,
                           estimator_Q=budget.estimator_queries, test_set_Q=queries_per_test_set(q, len(test)),
                           D=detections, sigma_star=sigma_star_or_zero(budget.queries, detections, cfg.k),
                           accounts=budget.accounts_used)
    report.check_invariants()
    return report


def run_calibrate(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioReport:
    seed = cfg.require_seed() if seed is None else seed
    encoder = detector_encoder(cfg, seed)
    benign = source_dataset(cfg, seed, "benign-data")
    calibration = calibrate_threshold(encoder, benign, cfg.k, cfg.target_fpr, derive_seed(seed, "calibration"))
    report = ScenarioReport("calibrate")
    report.add_row(seed=seed, **calibration.as_row())
    return report


def run_encoder_scenario(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioReport:
    """留出样本对上的编码器准确率（DS < z/2 判为同类）"""
    seed = cfg.require_seed() if seed is None else seed
    encoder = detector_encoder(cfg, seed)
    held_out = make_pairs(source_dataset(cfg, seed, "benign-data"), derive_seed(seed, "heldout-pairs"),
                          cfg.pairs, cfg.pair_balance)
    similar, dissimilar = mean_pair_distances(encoder, held_out)
    report = ScenarioReport("encoder")
    report.add_row(seed=seed, d=cfg.d, pair_accuracy=encoder_pair_accuracy(encoder, held_out,
                                                                           ContrastiveSpec(cfg.margin)),
                   similar_distance=similar, dissimilar_distance=dissimilar)
    return report


# ---------------------------------------------------------------- 自检

def _tiny_net(rng: np.random.Generator) -> FeedforwardNet:
    pool = AveragePool(4, 4, 2, 2)
    return FeedforwardNet([pool, Affine(rng.normal(size=(5, 8)), rng.normal(size=5)), Tanh(5),
                           Affine(rng.normal(size=(6, 5)), rng.normal(size=6)), ReLU(6),
                           Affine(rng.normal(size=(4, 6)), rng.normal(size=4)), Softmax(4)], (4, 4, 2))


def reprogram_gradient_error(seed: int = 0) -> float:
    """小规模实例上 ∂L/∂W 的解析值与中心差分的最大相对误差"""
    rng = make_rng(seed)
    clf = Classifier(build_mlp((6, 6, 2), [7], 4, rng), 4)
    task = ReprogramTask(LabelMapping.consecutive(4, 2, 2), PaddingSpec(2, 6, 2))
    batch = LabeledDataset(rng.uniform(-1, 1, size=(3, 2, 2, 2)), np.array([0, 1, 0]), 2, "target")
    prog = AdversarialProgram(rng.normal(0, 0.5, size=(6, 6, 2)), task.mask())
    _, g = loss_and_grad(prog, batch, task, clf)
    analytic = chain_to_w(g, prog)
    numeric = numeric_gradient(lambda w: reprogram_loss(AdversarialProgram(w, prog.M), batch, task, clf), prog.W)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def replay_identical_queries(k: int = 3, rho: float = 0.5) -> Tuple[List[str], DetectorState]:
    """k+1 个相同的查询：前 k 个通过，第 k+1 个被判定，缓冲区清空"""
    state = DetectorState()
    cfg = DetectorConfig(k, rho)
    verdicts = [observe_embedding(state, cfg, np.zeros(2))[0].value for _ in range(k + 1)]
    return verdicts, state


def selftest() -> ScenarioReport:
    """快速自检：梯度、检测统计算术、检测器回放、对比损失"""
    report = ScenarioReport("unit")
    rng = make_rng(0)
    layer_error = finite_diff_check(_tiny_net(rng), rng.uniform(-1, 1, size=(4, 4, 2)))
    report.add_row(check="layer_gradients", passed=layer_error < 1e-4, value=layer_error)
    program_error = reprogram_gradient_error()
    report.add_row(check="program_gradient", passed=program_error < 1e-4, value=program_error)
    for d, q, expected in ((1810, 110400, 0.8361), (980, 51480, 0.9709)):
        sigma_star = detection_stats(q, d, 50).sigma_star
        report.add_row(check=f"sigma_star_{d}_{q}", passed=abs(sigma_star - expected) < 1e-4, value=sigma_star)
    verdicts, state = replay_identical_queries()
    report.add_row(check="identical_query_replay",
                   passed=verdicts == ["pass", "pass", "pass", "flagged"] and state.detections == 1 and len(state) == 0,
                   value=state.detections)
    identity = SimilarityEncoder(FeedforwardNet([], (2,)), 1.0)
    spec = ContrastiveSpec(1.0)
    zero = np.zeros(2)
    values = (contrastive_loss(identity, (zero, zero), 0, spec),
              contrastive_loss(identity, (zero, np.array([2.0, 0.0])), 1, spec),
              contrastive_loss(identity, (zero, zero), 1, spec))
    report.add_row(check="contrastive_loss",
                   passed=abs(values[0]) < 1e-12 and abs(values[1]) < 1e-12 and abs(values[2] - 0.5) < 1e-12,
                   value=values[2])
    return report


SCENARIOS = {
    "whitebox-gap": run_whitebox_gap,
    "zo-detection": run_zo_detection,
    "surrogate-finetune": run_surrogate_finetune,
    "calibrate": run_calibrate,
    "encoder": run_encoder_scenario,
}
