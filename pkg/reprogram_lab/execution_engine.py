import logging
import time
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from reprogram_lab.config import ScenarioConfig
from reprogram_lab.database import ArtifactStore
from reprogram_lab.harness import SCENARIOS, ScenarioReport, selftest

logger = logging.getLogger(__name__)


class ScenarioStatus(Enum):
    """场景执行状态"""
    PENDING = "pending"      # 等待执行
    RUNNING = "running"      # 正在执行
    COMPLETED = "completed"  # 执行完成
    FAILED = "failed"        # 执行失败


class ScenarioExecutor:
    """场景执行器 - 负责执行单个种子上的一次场景"""

    def __init__(self):
        # 注册不同类型场景的执行函数
        self._executors: Dict[str, Callable[[ScenarioConfig, int], ScenarioReport]] = dict(SCENARIOS)
        self._executors["unit"] = lambda cfg, seed: selftest()

    def kinds(self) -> List[str]:
        return sorted(self._executors)

    def execute(self, cfg: ScenarioConfig, seed: int) -> Dict[str, Any]:
        """执行单个种子；失败被记录在结果中而不是向上抛出"""
        result: Dict[str, Any] = {
            "seed": seed,
            "kind": cfg.kind,
            "status": ScenarioStatus.PENDING.value,
            "start_time": time.time(),
            "end_time": None,
            "output": None,
            "error": None,
            "exception": None,
        }

        try:
            result["status"] = ScenarioStatus.RUNNING.value
            executor = self._executors.get(cfg.kind)
            if executor is None:
                raise ValueError(f"未知的场景类型: {cfg.kind}")
            result["output"] = executor(cfg, seed)
            result["status"] = ScenarioStatus.COMPLETED.value

        except Exception as e:
            result["status"] = ScenarioStatus.FAILED.value
            result["error"] = str(e)
            result["exception"] = e
            logger.error("场景 %s 在种子 %d 上失败: %s", cfg.kind, seed, e)

        finally:
            result["end_time"] = time.time()

        return result


class ScenarioEngine:
    """场景执行引擎：依次在 seed, seed+1, ... 上执行并合并报告"""

    def __init__(self, executor: Optional[ScenarioExecutor] = None):
        self.executor = executor or ScenarioExecutor()
        self.executed_seeds: Dict[int, Dict[str, Any]] = {}
        self.is_running = False

    def run(self, cfg: ScenarioConfig) -> Dict[str, Any]:
        if self.is_running:
            return {"success": False, "error": "场景已在执行中", "report": None, "executed_seeds": {}}

        self.is_running = True
        self.executed_seeds = {}
        try:
            # 自检不依赖随机种子
            if cfg.kind == "unit" and cfg.seed is None:
                seeds = [0]
            else:
                first = cfg.require_seed()
                seeds = list(range(first, first + cfg.num_seeds))
            report: Optional[ScenarioReport] = None
            for seed in seeds:
                # 缓存的键都含种子，换种子前释放上一个种子的产物
                ArtifactStore().clear()
                result = self.executor.execute(cfg, seed)
                self.executed_seeds[result["seed"]] = result
                if result["status"] == ScenarioStatus.FAILED.value:
                    return {"success": False, "error": result["error"], "exception": result["exception"],
                            "report": report, "executed_seeds": self.executed_seeds}
                report = result["output"] if report is None else report.extend(result["output"])
                logger.info("场景 %s 种子 %d 完成，用时 %.2fs", cfg.kind, result["seed"],
                            result["end_time"] - result["start_time"])
            return {"success": True, "report": report, "executed_seeds": self.executed_seeds}

        finally:
            ArtifactStore().clear()
            self.is_running = False

    def get_execution_status(self) -> Dict[str, Any]:
        """获取执行状态"""
        return {
            "is_running": self.is_running,
            "executed_seeds": {
                seed: {
                    "status": result["status"],
                    "start_time": result["start_time"],
                    "end_time": result["end_time"],
                    "error": result["error"]
                }
                for seed, result in self.executed_seeds.items()
            }
        }
