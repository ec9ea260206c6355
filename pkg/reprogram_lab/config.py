import configparser
import os
from typing import Any, Dict, List, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from reprogram_lab.errors import ConfigError

# 日志配置
LOG_DIR = os.getenv("REPROGRAM_LAB_LOG_DIR", "logs")

# 文件格式
WEIGHTS_MAGIC = b"RPGW"
DATASET_MAGIC = b"RPGD"
FORMAT_VERSION = 1

# 桌面级默认规模
DEFAULT_D = 32
DEFAULT_D_INNER = 16
DEFAULT_CHANNELS = 3
DEFAULT_SOURCE_CLASSES = 12
DEFAULT_TARGET_CLASSES = 2
DEFAULT_GROUP_SIZE = 6

# 攻击超参数
DEFAULT_ETA = 0.05
DEFAULT_EPOCHS = 10
DEFAULT_BATCH = 24
DEFAULT_MU = 0.1
DEFAULT_GAMMA = 2.0

# RMSprop
RMSPROP_DECAY = 0.9
RMSPROP_EPS = 1e-8

# 检测器
DEFAULT_K = 10
DEFAULT_TARGET_FPR = 0.001

SCENARIO_KINDS = ("whitebox-gap", "zo-detection", "surrogate-finetune", "calibrate", "encoder", "unit")


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class ScenarioConfig(BaseModel):
    """一次场景运行的完整配置（扁平键，按模块分节书写）"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # [scenario]
    seed: Optional[int] = None
    kind: str = "zo-detection"
    num_seeds: int = 1
    out: str = "reports"

    # [data]
    d: int = DEFAULT_D
    d_inner: int = DEFAULT_D_INNER
    channels: int = DEFAULT_CHANNELS
    source_classes: int = DEFAULT_SOURCE_CLASSES
    source_per_class: int = 50
    target_classes: int = DEFAULT_TARGET_CLASSES
    tr_sizes: List[int] = [200, 400]
    ts_size: int = 200

    # [models]
    hidden: List[int] = [512]
    surrogate_hidden: List[int] = [512, 128]
    source_epochs: int = 15
    source_lr: float = 1e-3
    source_batch: int = 32

    # [attack]
    q_values: List[int] = [5, 15, 30]
    gap_q: int = 30
    finetune_q_values: List[int] = [5, 15]
    finetune_epochs: int = 2
    mu: float = DEFAULT_MU
    b: Optional[float] = None
    eta: float = DEFAULT_ETA
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH
    group_size: int = DEFAULT_GROUP_SIZE
    gamma: float = DEFAULT_GAMMA
    raw_input_update: bool = False
    mask_directions: bool = False
    rotate_accounts: bool = False
    max_accounts: int = 100000

    # [encoder]
    embed_dim: int = 32
    encoder_hidden: int = 256
    margin: float = 1.0
    pairs: int = 2000
    pair_balance: float = 0.5
    encoder_epochs: int = 30
    encoder_lr: float = 1e-4
    encoder_batch: int = 32
    weight_decay: float = 1e-6
    encoder_optimizer: Literal["sgd", "rmsprop"] = "rmsprop"

    # [detector]
    k: int = DEFAULT_K
    target_fpr: float = DEFAULT_TARGET_FPR
    rho: Optional[float] = None

    @field_validator("tr_sizes", "hidden", "surrogate_hidden", "q_values", "finetune_q_values", mode="before")
    @classmethod
    def _parse_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("kind")
    @classmethod
    def _check_kind(cls, value: str) -> str:
        if value not in SCENARIO_KINDS:
            raise ValueError(f"未知的场景类型: {value}")
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> "ScenarioConfig":
        if self.d_inner >= self.d:
            raise ValueError(f"d_inner ({self.d_inner}) 必须小于 d ({self.d})")
        if min(self.d, self.d_inner, self.channels) < 1:
            raise ValueError("尺寸必须为正")
        if self.source_classes < 2 or self.target_classes < 1:
            raise ValueError("类别数不合法")
        if self.ts_size < 1 or not self.tr_sizes or min(self.tr_sizes) < 1:
            raise ValueError("tr_sizes 各项与 ts_size 必须 >= 1")
        if self.group_size < 1:
            raise ValueError("group_size 必须 >= 1")
        if self.target_classes * self.group_size > self.source_classes:
            raise ValueError("target_classes * group_size 不能超过 source_classes")
        if any(q < 1 for q in self.q_values + self.finetune_q_values + [self.gap_q]):
            raise ValueError("黑盒场景要求 q >= 1")
        if self.mu <= 0 or (self.b is not None and self.b <= 0):
            raise ValueError("mu 与 b 必须为正")
        if self.k < 1:
            raise ValueError("k 必须 >= 1")
        if not 0.0 <= self.target_fpr <= 1.0:
            raise ValueError("target_fpr 必须位于 [0, 1]")
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho 不能为负")
        if self.margin <= 0:
            raise ValueError("margin 必须为正")
        if not 0.0 <= self.pair_balance <= 1.0:
            raise ValueError("pair_balance 必须位于 [0, 1]")
        if self.num_seeds < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("num_seeds / batch_size / epochs 不合法")
        return self

    def input_dim(self) -> int:
        return self.d * self.d * self.channels

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("场景命令必须提供 --seed")
        return self.seed


# 配置文件中每个键所属的分节
SECTIONS: Dict[str, List[str]] = {
    "scenario": ["seed", "kind", "num_seeds", "out"],
    "data": ["d", "d_inner", "channels", "source_classes", "source_per_class", "target_classes",
             "tr_sizes", "ts_size"],
    "models": ["hidden", "surrogate_hidden", "source_epochs", "source_lr", "source_batch"],
    "attack": ["q_values", "gap_q", "finetune_q_values", "finetune_epochs", "mu", "b", "eta",
               "epochs", "batch_size", "group_size", "gamma", "raw_input_update", "mask_directions",
               "rotate_accounts", "max_accounts"],
    "encoder": ["embed_dim", "encoder_hidden", "margin", "pairs", "pair_balance", "encoder_epochs",
                "encoder_lr", "encoder_batch", "weight_decay", "encoder_optimizer"],
    "detector": ["k", "target_fpr", "rho"],
}


def read_config_file(path: str) -> Dict[str, str]:
    """读取分节的 key = value 配置文件，返回扁平字典"""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}")

    values: Dict[str, str] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"未知的配置分节: [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"分节 [{section}] 中的未知配置键: {key}")
            values[key] = value
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
    """加载配置：文件值在前，命令行覆盖在后"""
    values: Dict[str, Any] = {}
    if path:
        values.update(read_config_file(path))
    if overrides:
        values.update({key: value for key, value in overrides.items() if value is not None})
    return build_config(values)


def build_config(values: Mapping[str, Any]) -> ScenarioConfig:
    """校验并构造 ScenarioConfig，校验失败统一转换为 ConfigError"""
    try:
        return ScenarioConfig(**dict(values))
    except ValidationError as e:
        raise ConfigError(f"配置无效: {e}")
