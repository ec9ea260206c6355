from typing import Any, Optional


class ReprogramLabError(Exception):
    """框架内所有错误的基类"""


class ConfigError(ReprogramLabError, ValueError):
    """配置错误（退出码 2）"""


class ShapeError(ReprogramLabError, ValueError):
    """张量形状不匹配"""


class FormatError(ReprogramLabError, ValueError):
    """权重/数据集文件格式错误"""


class InvariantError(ReprogramLabError, RuntimeError):
    """运行时不变量被破坏"""


class NumericError(ReprogramLabError, ArithmeticError):
    """数值失败：NaN、发散等（退出码 3）"""


class TrainingError(NumericError):
    """训练发散"""


class StatsError(ReprogramLabError, ValueError):
    """Q = 0 时检测统计量无定义"""


class BlockedAccountError(ReprogramLabError, RuntimeError):
    """账号已被封禁，查询在模型计算之前被拒绝"""

    def __init__(self, account: int):
        super().__init__(f"账号 {account} 已被封禁")
        self.account = account


class AttackAbortedError(ReprogramLabError, RuntimeError):
    """账号耗尽，攻击中止；携带部分训练的对抗程序"""

    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


def exit_code_for(exc: BaseException) -> int:
    """把异常映射为进程退出码"""
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, NumericError):
        return 3
    return 1
