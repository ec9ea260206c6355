#!/usr/bin/env python
import argparse
import logging
import os
import sys
import time
import unittest
from collections import defaultdict
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import colorama
import coverage
from tqdm import tqdm

# 添加项目路径到系统路径
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.append(parent_dir)

log_dir = os.path.join(parent_dir, 'logs')
os.makedirs(log_dir, exist_ok=True)
log_file = os.path.join(log_dir, f'test_run_{datetime.now().strftime("%Y%m%d_%H%M%S")}.log')

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[logging.FileHandler(log_file)]
)

logger = logging.getLogger('reprogram_lab_tests')

colorama.init()

OUTCOME_STYLE = {
    "pass": (colorama.Fore.GREEN, "✓", "通过"),
    "fail": (colorama.Fore.RED, "F", "失败"),
    "error": (colorama.Fore.YELLOW, "E", "错误"),
    "skip": (colorama.Fore.CYAN, "S", "跳过"),
}
BOLD = colorama.Style.BRIGHT
RESET = colorama.Style.RESET_ALL


class ModuleTally:
    """按测试模块汇总结果与耗时"""

    def __init__(self):
        self.counts: Dict[str, Dict[str, int]] = defaultdict(lambda: dict.fromkeys(OUTCOME_STYLE, 0))
        self.seconds: Dict[str, float] = defaultdict(float)
        self.slowest: List[tuple] = []

    def add(self, test: unittest.TestCase, outcome: str, elapsed: float) -> None:
        module = type(test).__module__.rsplit(".", 1)[-1]
        self.counts[module][outcome] += 1
        self.seconds[module] += elapsed
        self.slowest.append((elapsed, test.id()))

    def totals(self) -> Dict[str, int]:
        return {key: sum(c[key] for c in self.counts.values()) for key in OUTCOME_STYLE}


class TallyResult(unittest.TestResult):
    """逐用例计时，tqdm 进度条显示当前模块与失败数"""

    def __init__(self, bar: tqdm, verbose: bool, failfast: bool = False):
        super().__init__()
        self.bar = bar
        self.verbose = verbose
        self.failfast = failfast
        self.tally = ModuleTally()
        self._started = 0.0

    def startTest(self, test):
        super().startTest(test)
        self._started = time.perf_counter()
        self.bar.set_postfix_str(type(test).__module__.rsplit(".", 1)[-1])

    def _finish(self, test, outcome: str, note: str = "") -> None:
        self.tally.add(test, outcome, time.perf_counter() - self._started)
        color, mark, _ = OUTCOME_STYLE[outcome]
        if self.verbose or outcome in ("fail", "error"):
            self.bar.write(f"{color}{mark} {test.id()}{note}{RESET}")
        bad = len(self.failures) + len(self.errors)
        if bad:
            self.bar.set_description(f"{colorama.Fore.RED}测试（{bad} 项未通过）{RESET}")
        self.bar.update(1)

    def addSuccess(self, test):
        super().addSuccess(test)
        self._finish(test, "pass")

    def addFailure(self, test, err):
        super().addFailure(test, err)
        self._finish(test, "fail")

    def addError(self, test, err):
        super().addError(test, err)
        self._finish(test, "error")

    def addSkip(self, test, reason):
        super().addSkip(test, reason)
        self._finish(test, "skip", f"（{reason}）")


def print_summary(result: TallyResult, elapsed: float, show_slowest: int) -> None:
    """模块汇总表、最慢用例与失败详情"""
    tally = result.tally
    print(f"\n{BOLD}{'模块':<26}{'通过':>6}{'失败':>6}{'错误':>6}{'跳过':>6}{'耗时(s)':>10}{RESET}")
    for module in sorted(tally.counts):
        c = tally.counts[module]
        color = colorama.Fore.RED if c["fail"] or c["error"] else ""
        print(f"{color}{module:<26}{c['pass']:>6}{c['fail']:>6}{c['error']:>6}{c['skip']:>6}"
              f"{tally.seconds[module]:>10.2f}{RESET}")

    if show_slowest:
        print(f"\n{BOLD}最慢的 {show_slowest} 个用例:{RESET}")
        for seconds, name in sorted(tally.slowest, reverse=True)[:show_slowest]:
            print(f"  {seconds:8.2f}s  {name}")

    for label, problems in (("失败", result.failures), ("错误", result.errors)):
        for test, trace in problems:
            print(f"\n{colorama.Fore.RED}{BOLD}{label}: {test.id()}{RESET}\n{trace}")

    totals = tally.totals()
    line = "  ".join(f"{OUTCOME_STYLE[k][0]}{OUTCOME_STYLE[k][2]} {v}{RESET}" for k, v in totals.items())
    print(f"\n{line}  用时 {elapsed:.2f}s")


def collect(selected: Optional[Sequence[str]] = None) -> unittest.TestSuite:
    """按 tests.__all__ 加载测试类；selected 按模块名子串过滤"""
    import tests

    if not tests.has_complex_scenario_test:
        logger.warning("未找到复杂场景测试模块，将不运行默认规模的趋势检查")
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for name in tests.__all__:
        test_class = getattr(tests, name)
        if selected and not any(s in test_class.__module__ for s in selected):
            continue
        suite.addTest(loader.loadTestsFromTestCase(test_class))
    return suite


def run_tests(with_coverage: bool = False, selected: Optional[Sequence[str]] = None, verbose: bool = False,
              failfast: bool = False, show_slowest: int = 5) -> bool:
    """运行测试套件，返回是否全部通过"""
    # 覆盖率需要在导入被测模块之前启动
    cov = coverage.Coverage(source=["reprogram_lab"], omit=["*/__main__.py"]) if with_coverage else None
    if cov is not None:
        cov.start()

    suite = collect(selected)
    total = suite.countTestCases()
    logger.info("开始运行 %d 个测试用例（筛选: %s）", total, ", ".join(selected or []) or "全部")

    started = time.perf_counter()
    with tqdm(total=total, desc="测试", unit="例", file=sys.stderr) as bar:
        result = TallyResult(bar, verbose, failfast)
        suite(result)
    elapsed = time.perf_counter() - started
    print_summary(result, elapsed, show_slowest)

    if cov is not None:
        cov.stop()
        cov.save()
        print(f"\n{BOLD}代码覆盖率:{RESET}")
        cov.report(skip_covered=True)
        reports_dir = os.path.join(parent_dir, 'reports', 'coverage')
        cov.html_report(directory=reports_dir)
        logger.info("HTML 覆盖率报告: %s", os.path.join(reports_dir, 'index.html'))

    totals = result.tally.totals()
    logger.info("测试完成: %s，用时 %.2fs", totals, elapsed)
    return result.wasSuccessful()


# 程序入口
if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='运行 Reprogram Lab 测试套件')
    parser.add_argument('suites', nargs='*', help='只运行模块名包含这些子串的测试，例如 detector zoattack')
    parser.add_argument('--coverage', action='store_true', help='启用代码覆盖率统计')
    parser.add_argument('--verbose', action='store_true', help='逐项显示所有用例')
    parser.add_argument('--failfast', action='store_true', help='遇到第一个失败即停止')
    parser.add_argument('--slowest', type=int, default=5, help='列出最慢的 N 个用例')
    args = parser.parse_args()

    if args.verbose:
        logging.getLogger('reprogram_lab').setLevel(logging.DEBUG)

    ok = run_tests(args.coverage, args.suites, args.verbose, args.failfast, args.slowest)
    sys.exit(0 if ok else 1)
