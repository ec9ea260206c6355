"""
数值内核

稠密 float64 张量运算、手写梯度的可微层、优化器以及有限差分梯度检查器。
层集合是封闭的（affine / relu / tanh / softmax / avgpool），每一层自己实现
前向与反向，不构建通用的自动微分图。
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from reprogram_lab.config import RMSPROP_DECAY, RMSPROP_EPS
from reprogram_lab.errors import FormatError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Dims = Tuple[int, ...]
SeedLike = Union[int, np.random.Generator, None]


def as_tensor(x: Any) -> Tensor:
    """转换为 float64 数组"""
    return np.asarray(x, dtype=np.float64)


def make_rng(seed: SeedLike) -> np.random.Generator:
    """统一的随机数生成器入口"""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{what} 中出现 NaN/Inf")
    return t


class Layer:
    """可微层基类：输入输出均为 (batch, features) 的二维数组"""

    kind = "layer"

    def __init__(self, in_size: int, out_size: int):
        self.in_size = in_size
        self.out_size = out_size

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        raise NotImplementedError("子类必须实现 forward")

    def backward(self, cache: Any, grad_y: Tensor) -> Tuple[List[Tensor], Tensor]:
        raise NotImplementedError("子类必须实现 backward")

    def parameters(self) -> List[Tensor]:
        return []

    def with_parameters(self, params: Sequence[Tensor]) -> "Layer":
        return self

    def describe(self) -> Tensor:
        """序列化时的结构描述"""
        return np.zeros(())


class Affine(Layer):
    """y = x Wᵀ + b，W 形状为 (out, in)"""

    kind = "affine"

    def __init__(self, weights: Tensor, bias: Tensor):
        weights = as_tensor(weights)
        bias = as_tensor(bias)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError(f"affine 参数形状不一致: W{weights.shape}, b{bias.shape}")
        super().__init__(weights.shape[1], weights.shape[0])
        self.weights = weights
        self.bias = bias

    def forward(self, x):
        return x @ self.weights.T + self.bias, x

    def backward(self, cache, grad_y):
        x = cache
        return [grad_y.T @ x, grad_y.sum(axis=0)], grad_y @ self.weights

    def parameters(self):
        return [self.weights, self.bias]

    def with_parameters(self, params):
        return Affine(params[0], params[1])


class ReLU(Layer):
    """在 0 处取次梯度 0"""

    kind = "relu"

    def __init__(self, size: int):
        super().__init__(size, size)

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, grad_y):
        return [], grad_y * (cache > 0.0)


class Tanh(Layer):
    kind = "tanh"

    def __init__(self, size: int):
        super().__init__(size, size)

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, grad_y):
        return [], grad_y * (1.0 - cache * cache)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, size: int):
        super().__init__(size, size)

    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, cache, grad_y):
        y = cache
        return [], y * (grad_y - (grad_y * y).sum(axis=1, keepdims=True))


class AveragePool(Layer):
    """对 h×w×c 图像做 p×p 不重叠平均池化"""

    kind = "avgpool"

    def __init__(self, height: int, width: int, channels: int, pool: int):
        if height % pool or width % pool:
            raise ShapeError(f"池化窗口 {pool} 不能整除 {height}x{width}")
        self.dims = (height, width, channels)
        self.pool = pool
        super().__init__(height * width * channels, (height // pool) * (width // pool) * channels)

    def forward(self, x):
        h, w, c = self.dims
        p = self.pool
        blocks = x.reshape(x.shape[0], h // p, p, w // p, p, c)
        return blocks.mean(axis=(2, 4)).reshape(x.shape[0], -1), x.shape[0]

    def backward(self, cache, grad_y):
        h, w, c = self.dims
        p = self.pool
        g = grad_y.reshape(cache, h // p, 1, w // p, 1, c) / (p * p)
        g = np.broadcast_to(g, (cache, h // p, p, w // p, p, c))
        return [], g.reshape(cache, -1).copy()

    def describe(self):
        return np.array([*self.dims, self.pool], dtype=np.float64)


class FeedforwardNet:
    """分层可微网络；源模型、代理模型与编码器都使用它"""

    def __init__(self, layers: Sequence[Layer], input_dims: Dims):
        self.layers = list(layers)
        self.input_dims = tuple(int(v) for v in input_dims)
        size = int(np.prod(self.input_dims))
        for i, layer in enumerate(self.layers):
            if layer.in_size != size:
                raise ShapeError(f"第 {i} 层输入维度 {layer.in_size} 与上一层输出 {size} 不匹配")
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise ShapeError("softmax 只能作为最后一层")
            size = layer.out_size
        self.output_size = size

    @property
    def is_classifier(self) -> bool:
        return bool(self.layers) and isinstance(self.layers[-1], Softmax)

    def _as_batch(self, x: Tensor) -> Tuple[Tensor, bool]:
        x = as_tensor(x)
        if x.shape == self.input_dims:
            return x.reshape(1, -1), True
        if x.shape[1:] == self.input_dims:
            return x.reshape(x.shape[0], -1), False
        raise ShapeError(f"输入形状 {x.shape} 与网络输入 {self.input_dims} 不匹配")

    def forward_cached(self, x: Tensor) -> Tuple[Tensor, List[Any], bool]:
        a, single = self._as_batch(x)
        caches = []
        for layer in self.layers:
            a, cache = layer.forward(a)
            caches.append(cache)
        return a, caches, single

    def forward(self, x: Tensor) -> Tensor:
        out, _, single = self.forward_cached(x)
        check_finite(out, "网络输出")
        return out[0] if single else out

    def backward(self, caches: List[Any], loss_grad: Tensor) -> Tuple[List[Tensor], Tensor]:
        """反向传播：返回（按 parameters() 顺序的参数梯度, 二维输入梯度）"""
        grads_per_layer: List[List[Tensor]] = []
        g = loss_grad
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            param_grads, g = layer.backward(cache, g)
            grads_per_layer.append(param_grads)
        flat = [grad for layer_grads in reversed(grads_per_layer) for grad in layer_grads]
        return flat, g

    def grad(self, x: Tensor, loss_grad: Tensor) -> Tuple[List[Tensor], Tensor]:
        out, caches, single = self.forward_cached(x)
        loss_grad = as_tensor(loss_grad)
        expected = (self.output_size,) if single else out.shape
        if loss_grad.shape != expected:
            raise ShapeError(f"loss_grad 形状 {loss_grad.shape} 应为 {expected}")
        param_grads, input_grad = self.backward(caches, loss_grad.reshape(out.shape))
        if single:
            return param_grads, input_grad.reshape(self.input_dims)
        return param_grads, input_grad.reshape((out.shape[0],) + self.input_dims)

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def with_parameters(self, params: Sequence[Tensor]) -> "FeedforwardNet":
        layers = []
        i = 0
        for layer in self.layers:
            n = len(layer.parameters())
            layers.append(layer.with_parameters(params[i:i + n]) if n else layer)
            i += n
        return FeedforwardNet(layers, self.input_dims)


def net_forward(net: FeedforwardNet, x: Tensor) -> Tensor:
    return net.forward(x)


def net_grad(net: FeedforwardNet, x: Tensor, loss_grad: Tensor) -> Tuple[List[Tensor], Tensor]:
    return net.grad(x, loss_grad)


def init_affine(in_size: int, out_size: int, rng: np.random.Generator, gain: float = 2.0) -> Affine:
    """He 正态初始化，偏置为 0"""
    weights = rng.normal(0.0, np.sqrt(gain / in_size), size=(out_size, in_size))
    return Affine(weights, np.zeros(out_size))


def build_mlp(input_dims: Dims, hidden: Sequence[int], out_size: int, seed: SeedLike,
              softmax: bool = True) -> FeedforwardNet:
    """flatten → [affine → relu]* → affine (→ softmax)"""
    rng = make_rng(seed)
    size = int(np.prod(input_dims))
    layers: List[Layer] = []
    for width in hidden:
        layers.append(init_affine(size, width, rng))
        layers.append(ReLU(width))
        size = width
    layers.append(init_affine(size, out_size, rng, gain=1.0))
    if softmax:
        layers.append(Softmax(out_size))
    return FeedforwardNet(layers, input_dims)


def numeric_gradient(fn: Callable[[Tensor], float], x: Tensor, step: float = 1e-5) -> Tensor:
    """中心差分数值梯度"""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        plus = fn(x)
        flat[i] = old - step
        minus = fn(x)
        flat[i] = old
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def _touches_relu_kink(net: FeedforwardNet, x: Tensor) -> bool:
    _, caches, _ = net.forward_cached(x)
    return any(isinstance(layer, ReLU) and np.any(cache == 0.0) for layer, cache in zip(net.layers, caches))


def finite_diff_check(net: FeedforwardNet, x: Tensor, tolerance: float = 1e-5,
                      step: float = 1e-5, seed: int = 0) -> float:
    """比较解析输入梯度与中心差分，返回 max |analytic − numeric| / max(1, |numeric|)

    标量损失取输出与固定随机向量的内积。若某个 relu 输入恰好为 0，先把 x 平移 1e-7。
    """
    x = as_tensor(x)
    if _touches_relu_kink(net, x):
        x = x + 1e-7
    weights = make_rng(seed).normal(size=net.output_size)

    def loss(z: Tensor) -> float:
        return float(np.dot(net.forward(z), weights))

    _, analytic = net.grad(x, weights)
    numeric = numeric_gradient(loss, x, step)
    error = float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))) if x.size else 0.0
    if error > tolerance:
        logger.warning("梯度检查误差 %.3e 超过容差 %.1e", error, tolerance)
    return error


@dataclass
class OptimizerState:
    """优化器状态；rmsprop 的累加器形状与参数一致"""

    kind: str = "sgd"
    lr: float = 0.05
    decay: float = RMSPROP_DECAY
    eps: float = RMSPROP_EPS
    accumulators: List[Tensor] = field(default_factory=list)


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], lr: float) -> List[Tensor]:
    if len(params) != len(grads):
        raise ShapeError("参数与梯度数量不一致")
    return [p - lr * g for p, g in zip(params, grads)]


def rmsprop_step(state: OptimizerState, params: Sequence[Tensor],
                 grads: Sequence[Tensor]) -> Tuple[OptimizerState, List[Tensor]]:
    """v' = ρv + (1−ρ)g²；p' = p − η·g/√(v'+ε)"""
    accumulators = state.accumulators or [np.zeros_like(p) for p in params]
    if len(accumulators) != len(params) or any(a.shape != p.shape for a, p in zip(accumulators, params)):
        raise ShapeError("rmsprop 累加器形状与参数不匹配")
    new_acc = [state.decay * v + (1.0 - state.decay) * g * g for v, g in zip(accumulators, grads)]
    new_params = [p - state.lr * g / np.sqrt(v + state.eps) for p, g, v in zip(params, grads, new_acc)]
    new_state = OptimizerState(state.kind, state.lr, state.decay, state.eps, new_acc)
    return new_state, new_params


def optimizer_step(state: OptimizerState, params: Sequence[Tensor],
                   grads: Sequence[Tensor]) -> Tuple[OptimizerState, List[Tensor]]:
    if state.kind == "sgd":
        return state, sgd_step(params, grads, state.lr)
    if state.kind == "rmsprop":
        return rmsprop_step(state, params, grads)
    raise ValueError(f"未知的优化器: {state.kind}")


_LAYER_KINDS = {"affine", "relu", "tanh", "softmax", "avgpool"}


def net_to_tensors(net: FeedforwardNet, prefix: str = "") -> Dict[str, Tensor]:
    """网络 → 自描述的命名张量集合（RPGW 写入用）"""
    tensors: Dict[str, Tensor] = {f"{prefix}input_dims": np.array(net.input_dims, dtype=np.float64)}
    for i, layer in enumerate(net.layers):
        name = f"{prefix}layer{i:02d}.{layer.kind}"
        if isinstance(layer, Affine):
            tensors[f"{name}.W"] = layer.weights
            tensors[f"{name}.b"] = layer.bias
        else:
            tensors[name] = np.atleast_1d(layer.describe()).astype(np.float64)
    return tensors


def net_from_tensors(tensors: Dict[str, Tensor], prefix: str = "") -> FeedforwardNet:
    """从命名张量集合恢复网络"""
    key = f"{prefix}input_dims"
    if key not in tensors:
        raise FormatError(f"缺少张量 {key}")
    input_dims = tuple(int(v) for v in tensors[key])
    entries: Dict[int, Dict[str, Any]] = {}
    for name, value in tensors.items():
        if not name.startswith(f"{prefix}layer"):
            continue
        parts = name[len(prefix):].split(".")
        index, kind = int(parts[0][len("layer"):]), parts[1]
        if kind not in _LAYER_KINDS:
            raise FormatError(f"未知的层类型: {kind}")
        entry = entries.setdefault(index, {"kind": kind})
        entry[parts[2] if len(parts) > 2 else "desc"] = value

    layers: List[Layer] = []
    size = int(np.prod(input_dims))
    for index in sorted(entries):
        entry = entries[index]
        kind = entry["kind"]
        if kind == "affine":
            layer: Layer = Affine(entry["W"], entry["b"])
        elif kind == "relu":
            layer = ReLU(size)
        elif kind == "tanh":
            layer = Tanh(size)
        elif kind == "softmax":
            layer = Softmax(size)
        else:
            h, w, c, p = (int(v) for v in entry["desc"])
            layer = AveragePool(h, w, c, p)
        layers.append(layer)
        size = layer.out_size
    return FeedforwardNet(layers, input_dims)
