"""
测试用的小规模固定件

源图 8x8 单通道、目标图 4x4、4 个源类别映射到 2 个目标类别，
分类器使用随机初始化的小网络，保证每个用例在秒级以内完成。
"""
import os
import sys

import numpy as np

# 添加项目路径到系统路径
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from reprogram_lab.config import build_config  # noqa: E402
from reprogram_lab.data import LabeledDataset, PaddingSpec  # noqa: E402
from reprogram_lab.models import Classifier, QueryRecord  # noqa: E402
from reprogram_lab.numkernel import build_mlp, make_rng  # noqa: E402
from reprogram_lab.reprogram import FocalLossSpec, LabelMapping, ReprogramTask  # noqa: E402

D = 8
D_INNER = 4
CHANNELS = 1
SOURCE_CLASSES = 4
TARGET_CLASSES = 2


def tiny_classifier(seed: int = 0, hidden=(8,)) -> Classifier:
    """未经训练的随机分类器，输入 (8, 8, 1)，输出 4 类"""
    return Classifier(build_mlp((D, D, CHANNELS), hidden, SOURCE_CLASSES, seed), SOURCE_CLASSES)


def tiny_task(gamma: float = 2.0) -> ReprogramTask:
    return ReprogramTask(LabelMapping.consecutive(SOURCE_CLASSES, TARGET_CLASSES, 2),
                         PaddingSpec(D_INNER, D, CHANNELS), FocalLossSpec(gamma))


def tiny_target(n: int = 6, seed: int = 0) -> LabeledDataset:
    """均衡的 4x4 目标域数据集"""
    rng = make_rng(seed)
    labels = np.arange(n) % TARGET_CLASSES
    return LabeledDataset(rng.uniform(-1, 1, size=(n, D_INNER, D_INNER, CHANNELS)), labels, TARGET_CLASSES,
                          "target")


def tiny_config(**overrides):
    """可在数秒内跑完所有场景的配置"""
    values = dict(
        seed=0, d=D, d_inner=D_INNER, channels=CHANNELS, source_classes=SOURCE_CLASSES, source_per_class=6,
        target_classes=TARGET_CLASSES, tr_sizes=[6], ts_size=6, hidden=[8], surrogate_hidden=[8, 4],
        source_epochs=2, q_values=[2], gap_q=2, finetune_q_values=[1], finetune_epochs=1, epochs=1,
        batch_size=3, group_size=2, embed_dim=4, encoder_hidden=8, pairs=20, encoder_epochs=2, k=2,
        target_fpr=0.1,
    )
    values.update(overrides)
    return build_config(values)


class BanAtQuery:
    """第 index+1 次查询被应答后封禁该账号的观察者"""

    def __init__(self, index: int):
        self.index = index
        self.records = []

    def notify(self, record: QueryRecord) -> bool:
        self.records.append(record)
        return record.sequence_index == self.index
