import io
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from unittest.mock import patch

# 添加项目根目录到Python路径
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from reprogram_lab.app import create_parser, main
from reprogram_lab.config import SECTIONS, ScenarioConfig, build_config, load_config, read_config_file
from reprogram_lab.errors import ConfigError, NumericError, TrainingError, exit_code_for
from reprogram_lab.harness import ScenarioReport, emit_report
from reprogram_lab.services import DataService

TINY_FLAGS = ["--d", "8", "--d_inner", "4", "--channels", "1", "--source_classes", "4", "--source_per_class", "3",
              "--target_classes", "2", "--group_size", "2", "--tr_sizes", "4", "--ts_size", "4"]


def _write(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
    return path


class TestConfig(unittest.TestCase):
    """测试配置加载与校验"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_defaults(self):
        """测试默认配置"""
        cfg = load_config()
        self.assertIsNone(cfg.seed)
        self.assertEqual(cfg.kind, "zo-detection")
        self.assertEqual((cfg.d, cfg.d_inner, cfg.channels), (32, 16, 3))
        self.assertEqual(cfg.q_values, [5, 15, 30])
        self.assertEqual(cfg.input_dim(), 32 * 32 * 3)

    def test_every_key_has_a_section(self):
        """测试每个配置键恰属于一个分节"""
        keys = [key for section in SECTIONS.values() for key in section]
        self.assertEqual(len(keys), len(set(keys)))
        self.assertEqual(set(keys), set(ScenarioConfig.model_fields))

    def test_config_file_and_overrides(self):
        """测试配置文件与命令行覆盖的优先级"""
        path = _write(os.path.join(self.tmp.name, "lab.ini"),
                      "[scenario]\nseed = 4\n\n[attack]\nq_values = 5, 15\neta = 0.1\n\n[detector]\nk = 3\n")
        cfg = load_config(path, {"k": "7", "eta": None})
        self.assertEqual(cfg.seed, 4)
        self.assertEqual(cfg.q_values, [5, 15])
        self.assertEqual(cfg.eta, 0.1)
        self.assertEqual(cfg.k, 7)

    def test_unknown_section_or_key(self):
        """测试未知分节或未知键被拒绝"""
        bad_section = _write(os.path.join(self.tmp.name, "a.ini"), "[plotting]\ndpi = 3\n")
        with self.assertRaises(ConfigError):
            read_config_file(bad_section)
        bad_key = _write(os.path.join(self.tmp.name, "b.ini"), "[detector]\nwindow = 3\n")
        with self.assertRaises(ConfigError):
            read_config_file(bad_key)
        with self.assertRaises(ConfigError):
            read_config_file(os.path.join(self.tmp.name, "missing.ini"))

    def test_validation(self):
        """测试取值范围校验统一报配置错误"""
        for values in ({"d": 8, "d_inner": 8}, {"kind": "sweep9"}, {"window": 3}, {"q_values": "0, 5"},
                       {"target_fpr": 1.5}, {"rho": -1.0}, {"k": 0}, {"source_classes": 4, "group_size": 3},
                       {"ts_size": 0}, {"tr_sizes": "200, 0"}, {"tr_sizes": "-5"}, {"group_size": 0}):
            with self.assertRaises(ConfigError, msg=str(values)):
                build_config(values)

    def test_require_seed(self):
        """测试场景命令必须提供种子"""
        with self.assertRaises(ConfigError):
            load_config().require_seed()
        self.assertEqual(load_config(overrides={"seed": "0"}).require_seed(), 0)

    def test_frozen(self):
        """测试配置不可变"""
        cfg = load_config()
        with self.assertRaises(Exception):
            cfg.seed = 3

    def test_exit_codes(self):
        """测试异常到退出码的映射"""
        self.assertEqual(exit_code_for(ConfigError("x")), 2)
        self.assertEqual(exit_code_for(NumericError("x")), 3)
        self.assertEqual(exit_code_for(TrainingError("x")), 3)
        self.assertEqual(exit_code_for(RuntimeError("x")), 1)


class TestCommandLine(unittest.TestCase):
    """测试命令行入口"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.common = ["--log-dir", os.path.join(self.tmp.name, "logs"), "--quiet"]

    def tearDown(self):
        self.tmp.cleanup()

    def _main(self, *argv: str) -> int:
        with redirect_stdout(io.StringIO()):
            return main(list(argv) + self.common)

    def test_every_key_is_a_flag(self):
        """测试每个配置键都有同名命令行参数"""
        args = create_parser().parse_args(["gen-data", "--seed", "3", "--rotate_accounts"])
        self.assertEqual(args.seed, "3")
        self.assertTrue(args.rotate_accounts)
        for keys in SECTIONS.values():
            for key in keys:
                self.assertTrue(hasattr(args, key), key)
        self.assertIsNone(args.raw_input_update)

    def test_raw_update_alias(self):
        """测试 --raw-paper-update 是 raw_input_update 的别名"""
        parser = create_parser()
        self.assertTrue(parser.parse_args(["report", "--raw-paper-update"]).raw_input_update)
        self.assertFalse(parser.parse_args(["report", "--no-raw-paper-update"]).raw_input_update)
        self.assertTrue(parser.parse_args(["report", "--raw_input_update"]).raw_input_update)
        args = parser.parse_args(["report", "--seed", "0", "--raw-paper-update"])
        self.assertTrue(load_config(overrides={key: getattr(args, key) for keys in SECTIONS.values()
                                               for key in keys}).raw_input_update)

    def test_selftest(self):
        """测试自检命令"""
        out = os.path.join(self.tmp.name, "reports")
        self.assertEqual(self._main("selftest", "--out", out), 0)
        self.assertTrue(os.path.exists(os.path.join(out, "unit_selftest.csv")))

    def test_missing_seed(self):
        """测试场景命令缺少 --seed 时退出码为 2"""
        self.assertEqual(self._main("report", "--kind", "zo-detection", "--out", self.tmp.name), 2)
        self.assertEqual(self._main("gen-data", "--out", self.tmp.name), 2)

    def test_invalid_config(self):
        """测试非法配置退出码为 2"""
        self.assertEqual(self._main("gen-data", "--seed", "0", "--d_inner", "40"), 2)
        self.assertEqual(self._main("calibrate", "--seed", "0", "--k", "zero"), 2)

    def test_gen_data(self):
        """测试生成数据集文件"""
        out = os.path.join(self.tmp.name, "data")
        self.assertEqual(self._main("gen-data", "--seed", "0", "--out", out, *TINY_FLAGS), 0)
        for name in ("source.rpgd", "target_train.rpgd", "target_test.rpgd"):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)

    def test_numeric_failure(self):
        """测试数值失败退出码为 3"""
        with patch.object(DataService, "generate", side_effect=NumericError("发散")):
            self.assertEqual(self._main("gen-data", "--seed", "0", "--out", self.tmp.name), 3)

    def test_report_from_csv(self):
        """测试重新输出已有的报告"""
        report = ScenarioReport("zo-detection", 10)
        report.add_row(seed=0, q=5, BR_t=0.5, Q=120, estimator_Q=108, test_set_Q=60, D=10,
                       sigma_star=11 * 10 / 120, accounts=1)
        path = os.path.join(self.tmp.name, "detection.csv")
        emit_report(report, path)
        self.assertEqual(self._main("report", "--from-csv", path, "--kind", "zo-detection", "--k", "10"), 0)

        broken = ScenarioReport("zo-detection", 10)
        broken.add_row(seed=0, q=5, BR_t=0.5, Q=120, estimator_Q=108, test_set_Q=60, D=11,
                       sigma_star=11 * 11 / 120, accounts=1)
        emit_report(broken, path)
        self.assertEqual(self._main("report", "--from-csv", path, "--kind", "zo-detection", "--k", "10"), 1)


if __name__ == "__main__":
    unittest.main()
