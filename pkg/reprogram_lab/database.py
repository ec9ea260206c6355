import struct
import threading
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from reprogram_lab.config import DATASET_MAGIC, FORMAT_VERSION, WEIGHTS_MAGIC
from reprogram_lab.errors import FormatError

_U32 = struct.Struct("<I")


class _Reader:
    """带越界检查的字节读取器"""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def remaining(self) -> int:
        return len(self.blob) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining():
            raise FormatError(f"文件被截断：需要 {n} 字节，仅剩 {self.remaining()} 字节")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def _write_tensor(parts: List[bytes], name: str, tensor: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    tensor = np.asarray(tensor, dtype=np.float64)
    parts.append(_U32.pack(len(encoded)))
    parts.append(encoded)
    parts.append(_U32.pack(tensor.ndim))
    parts.extend(_U32.pack(dim) for dim in tensor.shape)
    parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def _read_tensor(reader: _Reader) -> Tuple[str, np.ndarray]:
    name_len = reader.u32()
    try:
        name = reader.take(name_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"张量名不是合法 UTF-8: {e}")
    rank = reader.u32()
    if rank * 4 > reader.remaining():
        raise FormatError(f"张量 {name} 的秩 {rank} 超出文件长度")
    dims = tuple(reader.u32() for _ in range(rank))
    count = 1
    for dim in dims:
        count *= dim
    if count * 8 > reader.remaining():
        raise FormatError(f"张量 {name} 的维度 {dims} 溢出文件长度")
    data = np.frombuffer(reader.take(count * 8), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def _read_header(reader: _Reader, magic: bytes) -> int:
    if reader.take(4) != magic:
        raise FormatError(f"魔数错误，期望 {magic!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"不支持的格式版本 {version}")
    return reader.u32()


def encode_tensors(tensors: Mapping[str, np.ndarray], magic: bytes = WEIGHTS_MAGIC) -> bytes:
    """按 RPGW 布局编码命名张量"""
    parts = [magic, _U32.pack(FORMAT_VERSION), _U32.pack(len(tensors))]
    for name, tensor in tensors.items():
        _write_tensor(parts, name, tensor)
    return b"".join(parts)


def decode_tensors(blob: bytes, magic: bytes = WEIGHTS_MAGIC) -> Dict[str, np.ndarray]:
    reader = _Reader(blob)
    count = _read_header(reader, magic)
    tensors = dict(_read_tensor(reader) for _ in range(count))
    if reader.remaining():
        raise FormatError(f"文件末尾有 {reader.remaining()} 字节多余数据")
    return tensors


def save_weights(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_tensors(tensors))


def load_weights(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as handle:
        return decode_tensors(handle.read())


def encode_dataset(samples: np.ndarray, labels: np.ndarray, num_classes: int, domain: str) -> bytes:
    """RPGD：与 RPGW 相同的头部和张量记录，之后是类别数与 u32 标签块"""
    parts = [DATASET_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(1)]
    _write_tensor(parts, domain, samples)
    labels = np.asarray(labels)
    parts.append(_U32.pack(num_classes))
    parts.append(_U32.pack(labels.size))
    parts.append(labels.astype("<u4").tobytes())
    return b"".join(parts)


def decode_dataset(blob: bytes) -> Tuple[np.ndarray, np.ndarray, int, str]:
    reader = _Reader(blob)
    if _read_header(reader, DATASET_MAGIC) != 1:
        raise FormatError("数据集文件必须恰好包含一个样本张量")
    domain, samples = _read_tensor(reader)
    num_classes = reader.u32()
    count = reader.u32()
    if count * 4 > reader.remaining():
        raise FormatError(f"标签数 {count} 溢出文件长度")
    labels = np.frombuffer(reader.take(count * 4), dtype="<u4").astype(np.int64)
    if reader.remaining():
        raise FormatError(f"文件末尾有 {reader.remaining()} 字节多余数据")
    if samples.ndim == 0 or samples.shape[0] != count:
        raise FormatError(f"样本数 {samples.shape[:1]} 与标签数 {count} 不一致")
    return samples, labels, num_classes, domain


class ArtifactStore:
    """进程内的产物缓存（数据集、分类器、编码器），按键复用昂贵的训练结果"""

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        with cls._lock:
            if cls._instance is None:
                cls._instance = super().__new__(cls)
                cls._instance._artifacts = {}
            return cls._instance

    def get(self, key: Tuple[Any, ...]) -> Optional[Any]:
        """获取缓存的产物"""
        return self._artifacts.get(key)

    def add(self, key: Tuple[Any, ...], artifact: Any) -> Any:
        """缓存产物"""
        with self._lock:
            self._artifacts[key] = artifact
        return artifact

    def get_or_build(self, key: Tuple[Any, ...], builder: Callable[[], Any]) -> Any:
        """命中则返回缓存，否则构建后缓存"""
        artifact = self.get(key)
        if artifact is None:
            artifact = self.add(key, builder())
        return artifact

    def delete(self, key: Tuple[Any, ...]) -> bool:
        """删除产物"""
        with self._lock:
            return self._artifacts.pop(key, None) is not None

    def clear(self) -> None:
        """清空所有产物；场景引擎在每个种子开始前与运行结束后调用"""
        with self._lock:
            self._artifacts = {}

    def keys(self) -> List[Tuple[Any, ...]]:
        return list(self._artifacts)
