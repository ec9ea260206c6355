import logging
import os
from typing import Any, Dict, Optional

import numpy as np

from reprogram_lab.config import ScenarioConfig
from reprogram_lab.data import save_dataset
from reprogram_lab.detector import StatefulDetector
from reprogram_lab.encoder import save_encoder, write_encoder_history
from reprogram_lab.harness import (ScenarioReport, calibrated_detector, derive_seed, detector_encoder, emit_report,
                                   make_task, read_report, run_calibrate, run_encoder_scenario, sigma_star_or_zero,
                                   source_classifier, source_dataset, target_splits, zo_config)
from reprogram_lab.models import QueryChannel, save_classifier, write_training_log
from reprogram_lab.reprogram import reprogram_accuracy, save_program, whitebox_reprogram, write_reprogram_history
from reprogram_lab.zoattack import AccountPool, AttackTrace, blackbox_reprogram, finetune_from_surrogate

logger = logging.getLogger(__name__)


class OutputService:
    """服务基类：持有配置与运行种子，负责输出目录"""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.seed = cfg.require_seed()
        os.makedirs(cfg.out, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.cfg.out, name)


class DataService(OutputService):
    """合成数据服务类"""

    def generate(self) -> Dict[str, Any]:
        """生成源域数据集与目标域的 Tr 池 / Ts 划分"""
        source = source_dataset(self.cfg, self.seed)
        pool, test = target_splits(self.cfg, self.seed)
        files = {"source": self.path("source.rpgd"), "target_train": self.path("target_train.rpgd"),
                 "target_test": self.path("target_test.rpgd")}
        save_dataset(files["source"], source)
        save_dataset(files["target_train"], pool)
        save_dataset(files["target_test"], test)
        return {"files": files, "source_size": len(source), "train_pool": len(pool), "test_size": len(test)}


class ModelService(OutputService):
    """源分类器服务类"""

    def train_source(self) -> Dict[str, Any]:
        clf = source_classifier(self.cfg, self.seed, self.cfg.hidden, "model-a")
        weights = self.path("source_model.rpgw")
        save_classifier(weights, clf)
        write_training_log(self.path("source_training.csv"), clf.metadata.history)
        return {"weights": weights, "accuracy": clf.metadata.final_accuracy}


class EncoderService(OutputService):
    """相似度编码器服务类"""

    def train(self) -> Dict[str, Any]:
        encoder = detector_encoder(self.cfg, self.seed)
        weights = self.path("encoder.rpgw")
        save_encoder(weights, encoder)
        write_encoder_history(self.path("encoder_training.csv"), encoder)
        report = run_encoder_scenario(self.cfg, self.seed)
        emit_report(report, self.path("encoder_report.csv"))
        return {"weights": weights, "pair_accuracy": report.rows[0]["pair_accuracy"]}


class DetectorService(OutputService):
    """检测阈值标定服务类"""

    def calibrate(self) -> ScenarioReport:
        report = run_calibrate(self.cfg, self.seed)
        emit_report(report, self.path("calibration.csv"))
        return report


class AttackService(OutputService):
    """单次攻击服务类：白盒、直接黑盒、代理模型初始化后微调"""

    def _train_split(self):
        pool, test = target_splits(self.cfg, self.seed)
        return pool.subset(np.arange(max(self.cfg.tr_sizes))), test

    def whitebox(self) -> Dict[str, Any]:
        target = source_classifier(self.cfg, self.seed, self.cfg.hidden, "model-a")
        train, test = self._train_split()
        task = make_task(self.cfg)
        result = whitebox_reprogram(target, train, task, self.cfg.eta, self.cfg.epochs, self.cfg.batch_size,
                                    derive_seed(self.seed, "attack-whitebox"), self.cfg.raw_input_update)
        self._save(result, task, "whitebox")
        return {"R_t": reprogram_accuracy(result.program, test, task, target), "best_loss": result.best_loss}

    def blackbox(self, q: Optional[int] = None) -> Dict[str, Any]:
        """q 缺省取 q_values 的第一个值；检测器始终挂在查询通道上"""
        q = q or self.cfg.q_values[0]
        target = source_classifier(self.cfg, self.seed, self.cfg.hidden, "model-a")
        return self._query_attack(target, q, "blackbox", derive_seed(self.seed, f"attack-q{q}"))

    def surrogate(self, q: Optional[int] = None) -> Dict[str, Any]:
        """在代理模型 B 上白盒训练，再对目标模型 A 微调"""
        q = q or self.cfg.finetune_q_values[0]
        target = source_classifier(self.cfg, self.seed, self.cfg.hidden, "model-a")
        surrogate = source_classifier(self.cfg, self.seed, self.cfg.surrogate_hidden, "model-b")
        train, test = self._train_split()
        task = make_task(self.cfg)
        white = whitebox_reprogram(surrogate, train, task, self.cfg.eta, self.cfg.epochs, self.cfg.batch_size,
                                   derive_seed(self.seed, "surrogate-B"), self.cfg.raw_input_update)
        summary = self._query_attack(target, q, "surrogate", derive_seed(self.seed, f"finetune-A-q{q}"),
                                     init=white.program)
        summary["R_s"] = reprogram_accuracy(white.program, test, task, surrogate)
        return summary

    def _query_attack(self, target, q: int, name: str, seed: int, init=None) -> Dict[str, Any]:
        train, test = self._train_split()
        task = make_task(self.cfg)
        detector_cfg, _ = calibrated_detector(self.cfg, self.seed)
        detector = StatefulDetector(detector_cfg)
        channel = QueryChannel(target, observer=detector)
        pool = AccountPool(channel, max_accounts=self.cfg.max_accounts, rotate=self.cfg.rotate_accounts)
        trace = AttackTrace()
        zo = zo_config(self.cfg, q)
        if init is None:
            result, budget = blackbox_reprogram(channel, train, task, self.cfg.eta, self.cfg.epochs,
                                                self.cfg.batch_size, zo, seed, pool=pool,
                                                raw_input_update=self.cfg.raw_input_update, trace=trace)
        else:
            result, budget = finetune_from_surrogate(init, channel, train, task, self.cfg.eta,
                                                     self.cfg.finetune_epochs, self.cfg.batch_size, zo, seed,
                                                     pool=pool, raw_input_update=self.cfg.raw_input_update,
                                                     trace=trace)
        self._save(result, task, name)
        trace.write_csv(self.path(f"{name}_trace.csv"))
        detector.write_log(self.path(f"{name}_detections.csv"))
        _, detections = detector.totals(pool.opened)
        return {"q": q, "BR_t": reprogram_accuracy(result.program, test, task, target), "Q": budget.queries,
                "estimator_Q": budget.estimator_queries, "D": detections,
                "sigma_star": sigma_star_or_zero(budget.queries, detections, self.cfg.k),
                "accounts": budget.accounts_used}

    def _save(self, result, task, name: str) -> None:
        save_program(self.path(f"{name}_program.rpgw"), result.program)
        task.mapping.to_csv(self.path("label_mapping.csv"))
        write_reprogram_history(self.path(f"{name}_history.csv"), result)


class ScenarioExecutionService:
    """场景执行服务类"""

    def __init__(self):
        # 延迟导入，避免循环依赖
        from reprogram_lab.execution_engine import ScenarioEngine
        self.engine = ScenarioEngine()

    def run(self, cfg: ScenarioConfig, fmt: str = "console") -> Dict[str, Any]:
        """执行场景；成功时写出 CSV 报告并返回终端表格文本"""
        result = self.engine.run(cfg)
        if not result["success"]:
            return result
        report: ScenarioReport = result["report"]
        os.makedirs(cfg.out, exist_ok=True)
        seed_tag = "selftest" if cfg.kind == "unit" else f"seed{cfg.seed}x{cfg.num_seeds}"
        path = os.path.join(cfg.out, f"{cfg.kind}_{seed_tag}.csv")
        emit_report(report, path)
        result["path"] = path
        result["text"] = emit_report(report, fmt=fmt)
        return result

    def get_execution_status(self) -> Dict[str, Any]:
        """获取执行状态"""
        return self.engine.get_execution_status()


class ReportService:
    """报告服务类：读取已写出的 CSV，复核不变量后重新输出"""

    def show(self, path: str, kind: str, k: Optional[int] = None, fmt: str = "console") -> str:
        report = read_report(path, kind, k)
        report.check_invariants()
        return emit_report(report, fmt=fmt)
