"""
Reprogram Lab测试模块
包含所有自动测试的实现
"""

from .tests import (
    TestNumKernel,
    TestData,
    TestDatabase,
    TestModels
)

from .test_reprogram import TestLabelMapping, TestFocalLoss, TestAdversarialProgram, TestWhiteboxReprogram
from .test_zoattack import TestEstimator, TestAccountPool, TestBlackboxReprogram, TestFinetune
from .test_encoder import TestContrastiveLoss, TestEncoderTraining
from .test_detector import TestObserve, TestDetectionStats, TestStatefulDetector, TestCalibration
from .test_harness import TestScenarioReport, TestSelftest, TestScenarios
from .test_execution_engine import TestExecutionEngine, TestScenarioExecutionService
from .test_app import TestConfig, TestCommandLine

# 默认规模的趋势检查（条件导入，如果文件不存在则跳过）
try:
    from .complex_scenario_test import ComplexScenarioTest
    has_complex_scenario_test = True
except ImportError:
    has_complex_scenario_test = False

# 基本测试类
__all__ = [
    'TestNumKernel',
    'TestData',
    'TestDatabase',
    'TestModels',
    'TestLabelMapping',
    'TestFocalLoss',
    'TestAdversarialProgram',
    'TestWhiteboxReprogram',
    'TestEstimator',
    'TestAccountPool',
    'TestBlackboxReprogram',
    'TestFinetune',
    'TestContrastiveLoss',
    'TestEncoderTraining',
    'TestObserve',
    'TestDetectionStats',
    'TestStatefulDetector',
    'TestCalibration',
    'TestScenarioReport',
    'TestSelftest',
    'TestScenarios',
    'TestExecutionEngine',
    'TestScenarioExecutionService',
    'TestConfig',
    'TestCommandLine'
]

if has_complex_scenario_test:
    __all__.append('ComplexScenarioTest')
