import os
import struct
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

# 添加项目路径到系统路径
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.append(parent_dir)

# 导入需要测试的模块
from reprogram_lab.data import (LabeledDataset, PaddingSpec, gen_source_dataset, gen_target_dataset, load_dataset,
                                make_pairs, save_dataset, split_dataset)
from reprogram_lab.database import (ArtifactStore, decode_dataset, decode_tensors, encode_dataset, encode_tensors)
from reprogram_lab.errors import BlockedAccountError, ConfigError, FormatError, ShapeError
from reprogram_lab.models import (ArchConfig, Classifier, QueryChannel, accuracy, load_classifier, save_classifier,
                                  train_source_classifier, write_training_log)
from reprogram_lab.numkernel import (Affine, AveragePool, FeedforwardNet, OptimizerState, ReLU, Softmax, Tanh,
                                     build_mlp, finite_diff_check, net_forward, net_from_tensors, net_grad,
                                     net_to_tensors, optimizer_step, rmsprop_step, sgd_step)
from tests.helpers import BanAtQuery, tiny_classifier


class TestNumKernel(unittest.TestCase):
    """测试数值内核"""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def _mixed_net(self):
        rng = self.rng
        return FeedforwardNet([AveragePool(4, 4, 2, 2), Affine(rng.normal(size=(5, 8)), rng.normal(size=5)),
                               Tanh(5), Affine(rng.normal(size=(6, 5)), rng.normal(size=6)), ReLU(6),
                               Affine(rng.normal(size=(3, 6)), rng.normal(size=3)), Softmax(3)], (4, 4, 2))

    def test_affine_forward(self):
        """测试仿射层前向计算"""
        layer = Affine(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, -1.0]))
        y, _ = layer.forward(np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(y, [[4.0, 6.0]])

    def test_forward_matches_naive_matmul(self):
        """测试两层网络前向与逐元素循环实现一致"""
        net = build_mlp((3,), [4], 2, seed=1, softmax=False)
        x = self.rng.normal(size=3)
        w1, b1, w2, b2 = net.parameters()
        hidden = [max(0.0, sum(w1[i, j] * x[j] for j in range(3)) + b1[i]) for i in range(4)]
        expected = [sum(w2[i, j] * hidden[j] for j in range(4)) + b2[i] for i in range(2)]
        np.testing.assert_allclose(net_forward(net, x), expected, atol=1e-12)
        np.testing.assert_array_equal(net_forward(net, x), net_forward(net, x.copy()))

    def test_relu_subgradient_at_zero(self):
        """测试 ReLU 在 0 处的次梯度为 0"""
        _, grad = ReLU(3).backward(np.array([[-1.0, 0.0, 2.0]]), np.ones((1, 3)))
        np.testing.assert_array_equal(grad, [[0.0, 0.0, 1.0]])

    def test_softmax_is_stable(self):
        """测试 softmax 对大输入数值稳定"""
        y, _ = Softmax(3).forward(np.array([[1000.0, 1000.0, 1000.0], [0.0, 1.0, 2.0]]))
        self.assertTrue(np.all(np.isfinite(y)))
        np.testing.assert_allclose(y.sum(axis=1), [1.0, 1.0])
        np.testing.assert_allclose(y[0], [1 / 3] * 3)

    def test_average_pool(self):
        """测试平均池化前向与反向"""
        pool = AveragePool(2, 2, 1, 2)
        y, cache = pool.forward(np.array([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_allclose(y, [[2.5]])
        _, grad = pool.backward(cache, np.array([[1.0]]))
        np.testing.assert_allclose(grad, [[0.25, 0.25, 0.25, 0.25]])

        with self.assertRaises(ShapeError):
            AveragePool(3, 3, 1, 2)

    def test_finite_difference_check(self):
        """测试所有层的解析梯度与中心差分一致"""
        error = finite_diff_check(self._mixed_net(), self.rng.uniform(-1, 1, size=(4, 4, 2)))
        self.assertLess(error, 1e-5)

    def test_grad_shapes(self):
        """测试单样本与批量输入的梯度形状"""
        net = self._mixed_net()
        params = net.parameters()
        param_grads, input_grad = net_grad(net, np.zeros((4, 4, 2)), np.ones(3))
        self.assertEqual(input_grad.shape, (4, 4, 2))
        self.assertEqual([g.shape for g in param_grads], [p.shape for p in params])

        _, batch_grad = net_grad(net, np.zeros((5, 4, 4, 2)), np.ones((5, 3)))
        self.assertEqual(batch_grad.shape, (5, 4, 4, 2))

        with self.assertRaises(ShapeError):
            net_grad(net, np.zeros((4, 4, 2)), np.ones(4))

    def test_param_grad_matches_finite_difference(self):
        """测试参数梯度与对参数的中心差分一致"""
        net = build_mlp((3,), [4], 2, seed=5, softmax=False)
        x = np.array([0.3, -0.7, 0.9])
        weights = np.array([1.0, -2.0])
        param_grads, _ = net_grad(net, x, weights)
        w1, b1, w2, b2 = net.parameters()
        step = 1e-6
        for i, j in ((0, 0), (2, 1), (3, 2)):
            bumped = [w1.copy(), b1, w2, b2]
            bumped[0][i, j] += step
            plus = float(np.dot(net_forward(net.with_parameters(bumped), x), weights))
            bumped[0][i, j] -= 2 * step
            minus = float(np.dot(net_forward(net.with_parameters(bumped), x), weights))
            self.assertAlmostEqual(param_grads[0][i, j], (plus - minus) / (2 * step), places=5)

    def test_structure_errors(self):
        """测试网络结构校验"""
        with self.assertRaises(ShapeError):
            FeedforwardNet([Affine(np.zeros((2, 3)), np.zeros(2))], (4,))
        with self.assertRaises(ShapeError):
            FeedforwardNet([Softmax(3), Affine(np.zeros((2, 3)), np.zeros(2))], (3,))
        with self.assertRaises(ShapeError):
            Affine(np.zeros((2, 3)), np.zeros(3))
        with self.assertRaises(ShapeError):
            build_mlp((3,), [4], 2, seed=0).forward(np.zeros(5))

    def test_optimizers(self):
        """测试 SGD 与 RMSprop 单步更新"""
        params = [np.array([1.0])]
        grads = [np.array([2.0])]
        np.testing.assert_allclose(sgd_step(params, grads, 0.1), [[0.8]])

        state = OptimizerState(kind="rmsprop", lr=0.1, decay=0.9, eps=1e-8)
        state, updated = rmsprop_step(state, params, grads)
        np.testing.assert_allclose(state.accumulators[0], [0.4])
        np.testing.assert_allclose(updated[0], [1.0 - 0.1 * 2.0 / np.sqrt(0.4 + 1e-8)])

        with self.assertRaises(ValueError):
            optimizer_step(OptimizerState(kind="adam"), params, grads)
        with self.assertRaises(ShapeError):
            sgd_step(params, [], 0.1)

    def test_sgd_zero_rate(self):
        """测试学习率为 0 时参数不变"""
        params = [self.rng.normal(size=(3, 2)), self.rng.normal(size=3)]
        grads = [self.rng.normal(size=(3, 2)), self.rng.normal(size=3)]
        for before, after in zip(params, sgd_step(params, grads, 0.0)):
            np.testing.assert_array_equal(after, before)
        np.testing.assert_allclose(sgd_step([np.zeros(2)], [np.ones(2)], 0.05)[0], [-0.05, -0.05])

    def test_rmsprop_zero_gradient(self):
        """测试零梯度时参数不变、累加器按衰减系数缩小"""
        params = [np.array([1.5, -2.0])]
        state = OptimizerState(kind="rmsprop", lr=0.1, decay=0.9, eps=1e-8,
                               accumulators=[np.array([1.0, 4.0])])
        state, updated = rmsprop_step(state, params, [np.zeros(2)])
        np.testing.assert_array_equal(updated[0], params[0])
        np.testing.assert_allclose(state.accumulators[0], [0.9, 3.6])

    def test_rmsprop_constant_gradient(self):
        """测试恒定梯度下每步步长趋于 η·sign(g)"""
        g = np.array([0.5, -3.0, 0.02])
        params = [np.zeros(3)]
        state = OptimizerState(kind="rmsprop", lr=0.05, decay=0.9, eps=1e-12)
        for _ in range(300):
            previous = params[0]
            state, params = rmsprop_step(state, params, [g])
        np.testing.assert_allclose(previous - params[0], 0.05 * np.sign(g), rtol=1e-6)
        np.testing.assert_allclose(state.accumulators[0], g * g, rtol=1e-9)

    def test_net_tensors(self):
        """测试网络与命名张量集合的相互转换"""
        net = self._mixed_net()
        restored = net_from_tensors(net_to_tensors(net, prefix="enc."), prefix="enc.")
        x = self.rng.uniform(-1, 1, size=(4, 4, 2))
        np.testing.assert_array_equal(restored.forward(x), net.forward(x))

        with self.assertRaises(FormatError):
            net_from_tensors({"layer00.affine.W": np.zeros((1, 1))})


class TestData(unittest.TestCase):
    """测试合成数据"""

    def test_source_dataset(self):
        """测试源域数据集的形状、取值与确定性"""
        ds = gen_source_dataset(seed=1, s=4, per_class=5, d=8, c=3)
        self.assertEqual(len(ds), 20)
        self.assertEqual(ds.dims, (8, 8, 3))
        self.assertTrue(np.all(np.abs(ds.samples) <= 1.0))
        np.testing.assert_array_equal(ds.class_counts(), [5, 5, 5, 5])
        again = gen_source_dataset(seed=1, s=4, per_class=5, d=8, c=3)
        np.testing.assert_array_equal(ds.samples, again.samples)
        np.testing.assert_array_equal(ds.labels, again.labels)

    def test_source_needs_two_classes(self):
        """测试源域少于两个类别时报配置错误"""
        for s in (0, 1):
            with self.assertRaises(ConfigError, msg=str(s)):
                gen_source_dataset(seed=1, s=s, per_class=5, d=8, c=1)
        self.assertEqual(len(gen_source_dataset(seed=1, s=2, per_class=5, d=8, c=1)), 10)

    def test_source_classes_differ(self):
        """测试不同源类别的类均值明显分开"""
        ds = gen_source_dataset(seed=2, s=4, per_class=40, d=8, c=1, noise=0.25)
        means = np.array([ds.samples[ds.labels == k].mean(axis=0).reshape(-1) for k in range(4)])
        for a in range(4):
            for b in range(a + 1, 4):
                self.assertGreater(np.max(np.abs(means[a] - means[b])), 5 * 0.25 / np.sqrt(40))

    def test_target_dataset(self):
        """测试目标域数据集"""
        ds = gen_target_dataset(seed=3, t=2, per_class=6, d_inner=4, c=3)
        self.assertEqual(len(ds), 12)
        self.assertEqual(ds.dims, (4, 4, 3))
        self.assertEqual(ds.domain, "target")
        self.assertTrue(np.all(np.abs(ds.samples) <= 1.0))

    def test_split_dataset(self):
        """测试随机划分"""
        ds = gen_target_dataset(seed=3, t=2, per_class=5, d_inner=4, c=1)
        first, rest = split_dataset(ds, 4, seed=0)
        self.assertEqual((len(first), len(rest)), (4, 6))
        with self.assertRaises(ConfigError):
            split_dataset(ds, 11, seed=0)

    def test_padding(self):
        """测试居中零填充与掩码"""
        spec = PaddingSpec(4, 8, 3)
        mask = spec.mask()
        self.assertEqual(mask.shape, (8, 8, 3))
        self.assertEqual(int(mask.sum()), 8 * 8 * 3 - 4 * 4 * 3)
        self.assertTrue(np.all(mask[2:6, 2:6, :] == 0.0))

        x = np.ones((4, 4, 3))
        padded = spec.pad(x)
        np.testing.assert_array_equal(padded[2:6, 2:6, :], x)
        self.assertEqual(float(padded.sum()), 48.0)
        self.assertEqual(spec.pad(np.ones((5, 4, 4, 3))).shape, (5, 8, 8, 3))

        with self.assertRaises(ConfigError):
            PaddingSpec(8, 8).mask()
        with self.assertRaises(ShapeError):
            spec.pad(np.ones((5, 5, 3)))

    def test_padding_frame_cells(self):
        """测试 200×200 嵌入 224×224 时每个通道的画框格数"""
        mask = PaddingSpec(200, 224, 3).mask()
        for channel in range(3):
            self.assertEqual(int(mask[:, :, channel].sum()), 224 * 224 - 200 * 200)
        self.assertEqual(int(mask[:, :, 0].sum()), 10176)
        self.assertTrue(np.all(mask[12:212, 12:212, :] == 0.0))

    def test_make_pairs(self):
        """测试样本对的数量、比例与标签一致性"""
        ds = gen_source_dataset(seed=1, s=4, per_class=5, d=8, c=1)
        pairs = make_pairs(ds, seed=0, p=20, balance=0.5)
        self.assertEqual(len(pairs), 20)
        self.assertEqual(int((pairs.labels == 0).sum()), 10)
        same = ds.labels[pairs.left_index] == ds.labels[pairs.right_index]
        np.testing.assert_array_equal(same, pairs.labels == 0)
        keys = {(int(i), int(j)) for i, j in zip(pairs.left_index, pairs.right_index)}
        self.assertEqual(len(keys), 20)
        np.testing.assert_array_equal(pairs.left, ds.samples[pairs.left_index])

    def test_make_pairs_errors(self):
        """测试样本对不足或类别样本过少时报错"""
        ds = gen_source_dataset(seed=1, s=4, per_class=5, d=8, c=1)
        with self.assertRaises(ConfigError):
            make_pairs(ds, seed=0, p=200, balance=0.5)
        single = LabeledDataset(np.zeros((3, 2, 2, 1)), np.array([0, 0, 1]), 2)
        with self.assertRaises(ConfigError):
            make_pairs(single, seed=0, p=1)

    def test_dataset_validation(self):
        """测试数据集构造校验"""
        with self.assertRaises(ValueError):
            LabeledDataset(np.zeros((2, 2, 2, 1)), np.array([0, 3]), 2)
        with self.assertRaises(ShapeError):
            LabeledDataset(np.zeros((2, 2, 2, 1)), np.array([0]), 2)

    def test_save_and_load_dataset(self):
        """测试 RPGD 数据集文件"""
        ds = gen_target_dataset(seed=3, t=2, per_class=3, d_inner=4, c=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "target.rpgd")
            save_dataset(path, ds)
            loaded = load_dataset(path, expected_dims=(4, 4, 1))
            np.testing.assert_array_equal(loaded.samples, ds.samples)
            np.testing.assert_array_equal(loaded.labels, ds.labels)
            self.assertEqual(loaded.domain, "target")
            with self.assertRaises(ShapeError):
                load_dataset(path, expected_dims=(8, 8, 1))

    def test_empty_dataset_file(self):
        """测试空数据集写出后读回，样本形状保持 (0, 4, 4, 1)"""
        empty = LabeledDataset(np.zeros((0, 4, 4, 1)), np.zeros(0, dtype=np.int64), 2, "target")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "empty.rpgd")
            save_dataset(path, empty)
            loaded = load_dataset(path, expected_dims=(4, 4, 1))
        self.assertEqual(len(loaded), 0)
        self.assertEqual(loaded.samples.shape, (0, 4, 4, 1))
        self.assertEqual(loaded.num_classes, 2)
        self.assertEqual(loaded.domain, "target")


class TestDatabase(unittest.TestCase):
    """测试二进制格式与产物缓存"""

    def setUp(self):
        self.tensors = {"W": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.array([0.5, -0.5])}

    def test_tensor_codec(self):
        """测试 RPGW 编解码保留名称、形状与数值"""
        decoded = decode_tensors(encode_tensors(self.tensors))
        self.assertEqual(list(decoded), ["W", "b"])
        np.testing.assert_array_equal(decoded["W"], self.tensors["W"])

    def test_malformed_blobs(self):
        """测试魔数、版本、截断与多余字节"""
        blob = encode_tensors(self.tensors)
        with self.assertRaises(FormatError):
            decode_tensors(b"XXXX" + blob[4:])
        with self.assertRaises(FormatError):
            decode_tensors(blob[:4] + struct.pack("<I", 2) + blob[8:])
        with self.assertRaises(FormatError):
            decode_tensors(blob[:-3])
        with self.assertRaises(FormatError):
            decode_tensors(blob + b"\x00")
        with self.assertRaises(FormatError):
            decode_tensors(encode_dataset(np.zeros((1, 2)), np.array([0]), 1, "source"))

    def test_rank_overflow(self):
        """测试声明的秩超出文件长度时报错"""
        blob = b"RPGW" + struct.pack("<III", 1, 1, 1) + b"a" + struct.pack("<I", 1000)
        with self.assertRaises(FormatError):
            decode_tensors(blob)

    def test_dataset_codec(self):
        """测试 RPGD 样本数与标签数不一致时报错"""
        samples, labels, num_classes, domain = decode_dataset(
            encode_dataset(np.ones((2, 3)), np.array([1, 0]), 4, "target"))
        np.testing.assert_array_equal(labels, [1, 0])
        self.assertEqual((num_classes, domain), (4, "target"))
        with self.assertRaises(FormatError):
            decode_dataset(encode_dataset(np.ones((2, 3)), np.array([1]), 4, "target"))

    def test_artifact_store(self):
        """测试产物缓存为单例且只构建一次"""
        store = ArtifactStore()
        self.assertIs(store, ArtifactStore())
        calls = []
        key = ("test-artifact", id(self))

        def build():
            calls.append(1)
            return "artifact"

        try:
            self.assertEqual(store.get_or_build(key, build), "artifact")
            self.assertEqual(store.get_or_build(key, build), "artifact")
            self.assertEqual(len(calls), 1)
            self.assertIn(key, store.keys())
        finally:
            self.assertTrue(store.delete(key))
        self.assertIsNone(store.get(key))


class TestModels(unittest.TestCase):
    """测试分类器与查询通道"""

    def setUp(self):
        self.clf = tiny_classifier()
        self.x = np.full((8, 8, 1), 0.1)

    def test_classifier_requires_softmax(self):
        """测试分类器网络必须以 softmax 结尾"""
        with self.assertRaises(ShapeError):
            Classifier(build_mlp((8, 8, 1), [4], 4, seed=0, softmax=False), 4)

    def test_random_weights_score_at_chance(self):
        """测试随机权重网络在类别均衡的数据上准确率约为 1/s"""
        s, per_class = 4, 1000
        rng = np.random.default_rng(11)
        balanced = LabeledDataset(rng.uniform(-1, 1, size=(s * per_class, 4, 4, 1)),
                                  rng.permutation(np.repeat(np.arange(s), per_class)), s)
        for seed in range(3):
            clf = Classifier(build_mlp((4, 4, 1), [16], s, seed=seed), s)
            self.assertAlmostEqual(accuracy(clf, balanced), 1.0 / s, delta=0.05)

    def test_channel_counts_queries(self):
        """测试查询通道逐账号计数"""
        channel = QueryChannel(self.clf, keep_history=True)
        scores = channel.predict_scores(0, self.x)
        self.assertEqual(scores.shape, (4,))
        self.assertAlmostEqual(float(scores.sum()), 1.0)
        channel.predict_scores(0, self.x)
        channel.predict_scores(3, self.x)
        self.assertEqual(channel.query_count(0), 2)
        self.assertEqual(channel.total_queries(), 3)
        self.assertEqual(channel.total_queries([3]), 1)
        self.assertEqual(channel.accounts(), [0, 3])
        self.assertEqual([r.sequence_index for r in channel.history(0)], [0, 1])

    def test_channel_rejects_wrong_shape(self):
        """测试形状错误的查询不计数"""
        channel = QueryChannel(self.clf)
        with self.assertRaises(ShapeError):
            channel.predict_scores(0, np.zeros((4, 4, 1)))
        self.assertEqual(channel.query_count(0), 0)

    def test_ban_applies_after_detecting_query(self):
        """测试触发封禁的查询照常应答，之后的查询在计算之前被拒绝"""
        observer = BanAtQuery(1)
        channel = QueryChannel(self.clf, observer=observer)
        channel.predict_scores(0, self.x)
        self.assertEqual(channel.predict_scores(0, self.x).shape, (4,))
        self.assertTrue(channel.is_blocked(0))
        with self.assertRaises(BlockedAccountError) as ctx:
            channel.predict_scores(0, self.x)
        self.assertEqual(ctx.exception.account, 0)
        self.assertEqual(channel.query_count(0), 2)
        self.assertEqual(len(observer.records), 2)
        channel.predict_scores(1, self.x)
        self.assertFalse(channel.is_blocked(1))

    def test_accuracy(self):
        """测试准确率与空数据集"""
        ds = gen_source_dataset(seed=0, s=4, per_class=3, d=8, c=1)
        acc = accuracy(self.clf, ds)
        self.assertTrue(0.0 <= acc <= 1.0)
        with self.assertRaises(ValueError):
            accuracy(self.clf, ds.subset(np.arange(0)))

    def test_train_source_classifier(self):
        """测试源分类器训练的确定性与元数据"""
        ds = gen_source_dataset(seed=0, s=4, per_class=10, d=8, c=1)
        arch = ArchConfig(hidden=(16,), epochs=3, batch_size=8)
        clf = train_source_classifier(ds, arch, seed=5)
        again = train_source_classifier(ds, arch, seed=5)
        for a, b in zip(clf.net.parameters(), again.net.parameters()):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(clf.metadata.epochs, 3)
        self.assertEqual([row["epoch"] for row in clf.metadata.history], [1, 2, 3])
        self.assertTrue(0.0 <= clf.metadata.final_accuracy <= 1.0)

    def test_save_and_load_classifier(self):
        """测试分类器权重文件与训练日志"""
        ds = gen_source_dataset(seed=0, s=4, per_class=5, d=8, c=1)
        clf = train_source_classifier(ds, ArchConfig(hidden=(8,), epochs=2, batch_size=8), seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "source_model.rpgw")
            save_classifier(path, clf)
            loaded = load_classifier(path)
            np.testing.assert_array_equal(loaded.predict_proba(ds.samples), clf.predict_proba(ds.samples))
            self.assertEqual(loaded.metadata.seed, 1)
            self.assertAlmostEqual(loaded.metadata.final_accuracy, clf.metadata.final_accuracy)

            log = os.path.join(tmp, "source_training.csv")
            write_training_log(log, clf.metadata.history)
            frame = pd.read_csv(log)
            self.assertEqual(list(frame.columns), ["epoch", "loss", "accuracy"])
            self.assertEqual(len(frame), 2)


if __name__ == "__main__":
    unittest.main()
