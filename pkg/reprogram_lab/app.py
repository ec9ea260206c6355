import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from reprogram_lab import __version__
from reprogram_lab.config import SECTIONS, ScenarioConfig, load_config
from reprogram_lab.errors import exit_code_for
from reprogram_lab.extensions import setup_logging
from reprogram_lab.services import (AttackService, DataService, DetectorService, EncoderService, ModelService,
                                    ReportService, ScenarioExecutionService)

logger = logging.getLogger(__name__)

COMMANDS = {
    "gen-data": "生成合成源域/目标域数据集",
    "train-source": "训练源分类器",
    "train-encoder": "训练相似度编码器",
    "calibrate": "在良性数据上标定检测阈值 ρ",
    "attack-whitebox": "白盒重编程",
    "attack-blackbox": "零阶黑盒重编程（挂载检测器）",
    "attack-surrogate": "代理模型初始化后少量查询微调",
    "report": "执行 --kind 指定的场景并输出报告，或重新输出已有的 CSV 报告",
    "selftest": "快速自检",
}


# 兼容旧名称的参数别名
FLAG_ALIASES = {"raw_input_update": ["--raw-paper-update"]}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """每个配置键都对应一个同名命令行参数"""
    for section, keys in SECTIONS.items():
        group = parser.add_argument_group(f"[{section}]")
        for key in keys:
            field = ScenarioConfig.model_fields[key]
            if field.annotation is bool:
                group.add_argument(f"--{key}", *FLAG_ALIASES.get(key, []), dest=key,
                                   action=argparse.BooleanOptionalAction, default=None)
            else:
                group.add_argument(f"--{key}", default=None, metavar=key.upper())


def create_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="分节 key = value 配置文件")
    common.add_argument("--log-dir", default=None, help="日志目录")
    common.add_argument("--verbose", action="store_true")
    common.add_argument("--quiet", action="store_true", help="不显示进度条")
    _add_config_flags(common)

    parser = argparse.ArgumentParser(prog="reprogram-lab", description="对抗重编程与有状态检测的桌面级实验")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        if name == "report":
            sub.add_argument("--from-csv", default=None, help="重新输出已有的报告 CSV")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: getattr(args, key) for keys in SECTIONS.values() for key in keys}


def _summary(title: str, summary: Dict[str, Any]) -> int:
    print(title)
    for key, value in summary.items():
        print(f"  {key}: {value}")
    return 0


def _run_scenario(cfg: ScenarioConfig) -> int:
    result = ScenarioExecutionService().run(cfg)
    if not result["success"]:
        raise result.get("exception") or RuntimeError(result["error"])
    print(result["text"])
    print(f"报告已写入 {result['path']}")
    if cfg.kind == "unit" and not all(row["passed"] for row in result["report"].rows):
        logger.error("自检未通过")
        return 1
    return 0


def _report(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    if args.from_csv:
        print(ReportService().show(args.from_csv, cfg.kind, cfg.k))
        return 0
    return _run_scenario(cfg)


def _selftest(cfg: ScenarioConfig) -> int:
    return _run_scenario(cfg.model_copy(update={"kind": "unit"}))


HANDLERS: Dict[str, Callable[[ScenarioConfig, argparse.Namespace], int]] = {
    "gen-data": lambda cfg, args: _summary("数据集", DataService(cfg).generate()),
    "train-source": lambda cfg, args: _summary("源分类器", ModelService(cfg).train_source()),
    "train-encoder": lambda cfg, args: _summary("相似度编码器", EncoderService(cfg).train()),
    "calibrate": lambda cfg, args: _summary("阈值标定", DetectorService(cfg).calibrate().rows[0]),
    "attack-whitebox": lambda cfg, args: _summary("白盒重编程", AttackService(cfg).whitebox()),
    "attack-blackbox": lambda cfg, args: _summary("黑盒重编程", AttackService(cfg).blackbox()),
    "attack-surrogate": lambda cfg, args: _summary("代理模型微调", AttackService(cfg).surrogate()),
    "report": _report,
    "selftest": lambda cfg, args: _selftest(cfg),
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = create_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_dir, verbose=args.verbose, quiet=args.quiet)
    try:
        cfg = load_config(args.config, _overrides(args))
        return HANDLERS[args.command](cfg, args)
    except Exception as e:
        code = exit_code_for(e)
        logger.error("%s 失败（退出码 %d）: %s", args.command, code, e)
        return code


# 程序入口
if __name__ == "__main__":
    sys.exit(main())
