#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
体数据核心模块
Volume / LabelMap 数据类型、DLFV 文件读写、图像块提取、归一化、坐标图、
稠密网格采样与拼接

数组布局统一为 (C, X, Y, Z)；文件内按通道优先、z 最慢、x 最快的顺序存储
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from errors import ShapeError, VolumeFormatError
from utils import retry_with_backoff

Dims = Tuple[int, int, int]

# 文件头: magic, version, dtype, 3 字节填充, channels, Nx, Ny, Nz, spacing[3]
DLFV_MAGIC = b"DLFV"
DLFV_VERSION = 1
DLFV_HEADER = struct.Struct("<4sIB3xI3I3f")
DTYPE_FLOAT32 = 0
DTYPE_INT32 = 1
_DTYPE_CODES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_INT32: np.dtype("<i4")}
MAX_VOXELS = 2 ** 34

assert DLFV_HEADER.size == 40


@dataclass(frozen=True)
class Volume:
    """多通道三维标量体数据"""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4:
            raise ShapeError(f"Volume 需要 (C, X, Y, Z) 数组，得到形状 {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"Volume 维度必须 ≥ 1: {data.shape}")
        if data.dtype.kind == 'f':
            data = data.astype(np.float32, copy=False)
            if not np.all(np.isfinite(data)):
                raise ShapeError("Volume 含有 NaN/Inf")
        elif data.dtype.kind in 'iu':
            data = data.astype(np.int32, copy=False)
        else:
            raise ShapeError(f"不支持的数据类型: {data.dtype}")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ShapeError(f"spacing 必须为 3 个正数: {self.spacing}")
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'spacing', spacing)

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape[1:])

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]


@dataclass(frozen=True)
class LabelMap:
    """单通道整数标签图，取值 0..L-1（0 为背景）"""

    data: np.ndarray
    n_labels: int
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 4 and data.shape[0] == 1:
            data = data[0]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"LabelMap 需要 (X, Y, Z) 数组，得到形状 {data.shape}")
        if data.dtype.kind not in 'iu':
            raise ShapeError(f"LabelMap 需要整数类型，得到 {data.dtype}")
        if self.n_labels < 2:
            raise ShapeError(f"标签数 L 必须 ≥ 2: {self.n_labels}")
        data = data.astype(np.int32, copy=False)
        if data.min() < 0 or data.max() >= self.n_labels:
            raise ShapeError(f"标签取值超出 [0, {self.n_labels - 1}]: [{data.min()}, {data.max()}]")
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'spacing', tuple(float(np.float32(s)) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    def to_volume(self) -> Volume:
        return Volume(self.data[np.newaxis], self.spacing)


@dataclass(frozen=True)
class PatchSpec:
    """图像块位置与大小"""

    center: Dims
    size: Dims

    def clamped(self, dims: Sequence[int]) -> "PatchSpec":
        return PatchSpec(clamp_center(self.center, self.size, dims), tuple(self.size))

    def slices(self, dims: Sequence[int]) -> Tuple[slice, slice, slice]:
        """块在体数据中的切片（已按边界夹紧）"""
        center = clamp_center(self.center, self.size, dims)
        starts = [c - p // 2 for c, p in zip(center, self.size)]
        return tuple(slice(s, s + p) for s, p in zip(starts, self.size))


@dataclass(frozen=True)
class AtlasBundle:
    """已配准到目标网格的图谱：两种模态图像 + 候选分割"""

    images: Volume
    labels: LabelMap
    name: str = field(default="atlas")

    def __post_init__(self):
        if self.images.dims != self.labels.dims:
            raise ShapeError(f"图谱图像 {self.images.dims} 与标签 {self.labels.dims} 尺寸不一致")


# ==================== 文件读写 ====================

@retry_with_backoff()
def write_volume(v: Volume, path) -> None:
    """
    写出 DLFV 文件

    Args:
        v: 体数据（float32 写为 dtype 0，int32 写为 dtype 1）
        path: 输出路径
    """
    path = Path(path)
    dtype_code = DTYPE_INT32 if v.data.dtype.kind == 'i' else DTYPE_FLOAT32
    nx, ny, nz = v.dims
    header = DLFV_HEADER.pack(DLFV_MAGIC, DLFV_VERSION, dtype_code, v.channels, nx, ny, nz, *v.spacing)
    # (C, X, Y, Z) -> (C, Z, Y, X)，使 x 变化最快
    payload = np.ascontiguousarray(v.data.transpose(0, 3, 2, 1)).astype(_DTYPE_CODES[dtype_code], copy=False)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(payload.tobytes())
    logger.debug(f"写出体数据 {path} dims={v.dims} C={v.channels}")


@retry_with_backoff()
def read_volume(path) -> Volume:
    """
    读取 DLFV 文件

    Raises:
        VolumeFormatError: magic 错误、dtype 未知、版本不支持、维度溢出或数据截断
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < DLFV_HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, dtype_code, channels, nx, ny, nz, sx, sy, sz = DLFV_HEADER.unpack_from(raw)
    if magic != DLFV_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != DLFV_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise VolumeFormatError(f"{path}: dtype code unknown ({dtype_code})")
    count = channels * nx * ny * nz
    if min(channels, nx, ny, nz) < 1 or count > MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims overflow (C={channels}, dims=({nx},{ny},{nz}))")
    dtype = _DTYPE_CODES[dtype_code]
    expected = DLFV_HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"{path}: truncated payload ({len(raw)} bytes, expected {expected})")
    payload = np.frombuffer(raw, dtype=dtype, offset=DLFV_HEADER.size).reshape(channels, nz, ny, nx)
    data = payload.transpose(0, 3, 2, 1).astype(dtype.type)
    if dtype_code == DTYPE_FLOAT32 and not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: payload contains NaN/Inf")
    return Volume(data, (float(sx), float(sy), float(sz)))


def write_labelmap(lm: LabelMap, path) -> None:
    """写出标签图（dtype 1，单通道）"""
    write_volume(lm.to_volume(), path)


def read_labelmap(path, n_labels: Optional[int] = None) -> LabelMap:
    """
    读取标签图

    Args:
        path: 文件路径
        n_labels: 标签数；缺省时取 max(最大标签+1, 2)
    """
    v = read_volume(path)
    if v.data.dtype.kind != 'i' or v.channels != 1:
        raise VolumeFormatError(f"{path}: 不是标签图 (dtype={v.data.dtype}, C={v.channels})")
    data = v.data[0]
    if n_labels is None:
        n_labels = max(int(data.max()) + 1, 2)
    return LabelMap(data, n_labels, v.spacing)


# ==================== 体素运算 ====================

def znormalize(v: Volume, eps: float = 1e-8) -> Volume:
    """
    逐通道 z-score 归一化（总体标准差），常数通道输出全 0
    """
    data = v.data.astype(np.float64)
    axes = (1, 2, 3)
    mean = data.mean(axis=axes, keepdims=True)
    centered = data - mean
    std = np.sqrt((centered ** 2).mean(axis=axes, keepdims=True))
    safe = np.where(std > eps, std, 1.0)
    out = np.where(std > eps, centered / safe, 0.0)
    return Volume(out.astype(np.float32), v.spacing)


def coordinate_maps(dims: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> Volume:
    """
    坐标图：通道 k 为沿第 k 轴归一化到 [-1, 1] 的坐标；单体素轴取 0
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"dims 必须为 3 个 ≥1 的整数: {dims}")
    axes = []
    for n in dims:
        if n == 1:
            axes.append(np.zeros(1, dtype=np.float64))
        else:
            axes.append(-1.0 + 2.0 * np.arange(n, dtype=np.float64) / (n - 1))
    grids = np.meshgrid(*axes, indexing='ij')
    return Volume(np.stack(grids).astype(np.float32), spacing)


def one_hot(lm: LabelMap, n_labels: Optional[int] = None) -> Volume:
    """标签图转为 L 通道二值体数据"""
    n_labels = lm.n_labels if n_labels is None else n_labels
    if lm.data.max() >= n_labels:
        raise ShapeError(f"标签 {lm.data.max()} ≥ L={n_labels}")
    out = (lm.data[np.newaxis] == np.arange(n_labels).reshape(-1, 1, 1, 1)).astype(np.float32)
    return Volume(out, lm.spacing)


def argmax_labels(scores: np.ndarray, n_labels: Optional[int] = None, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    """逐体素沿通道取 argmax，平局取最小标签"""
    scores = np.asarray(scores)
    n_labels = scores.shape[0] if n_labels is None else n_labels
    return LabelMap(np.argmax(scores, axis=0).astype(np.int32), max(n_labels, 2), spacing)


def clamp_center(center: Sequence[int], size: Sequence[int], dims: Sequence[int]) -> Dims:
    """夹紧块中心，使 [c - P//2, c - P//2 + P) 完全落在体内"""
    if len(center) != 3 or len(size) != 3 or len(dims) != 3:
        raise ShapeError("center/size/dims 必须均为三元组")
    out = []
    for c, p, n in zip(center, size, dims):
        if p > n:
            raise ShapeError(f"块大小 {tuple(size)} 超过体数据尺寸 {tuple(dims)}")
        lo, hi = p // 2, n - p + p // 2
        out.append(int(min(max(int(c), lo), hi)))
    return tuple(out)


def extract_patch(v: Volume, spec: PatchSpec) -> Volume:
    """按（夹紧后的）中心复制轴对齐图像块"""
    sx, sy, sz = spec.slices(v.dims)
    return Volume(v.data[:, sx, sy, sz].copy(), v.spacing)


def extract_label_patch(lm: LabelMap, spec: PatchSpec) -> LabelMap:
    """标签图版本的 extract_patch"""
    sx, sy, sz = spec.slices(lm.dims)
    return LabelMap(lm.data[sx, sy, sz].copy(), lm.n_labels, lm.spacing)


def _axis_centers(n: int, p: int, stride: int) -> List[int]:
    # 步长大于块时按块大小前进，相邻块之间不留空隙
    starts = list(range(0, n - p + 1, min(stride, p)))
    if starts[-1] + p < n:
        starts.append(n - p)
    return [s + p // 2 for s in starts]


def dense_grid_centers(dims: Sequence[int], patch_size: Sequence[int], stride: Sequence[int]) -> List[Dims]:
    """
    稠密笛卡尔网格上的块中心，最后一个中心夹紧到边界，块的并集覆盖全部体素

    Args:
        dims: 体数据尺寸
        patch_size: 块大小
        stride: 各轴步长（≥1），超过块大小时按块大小计
    """
    if isinstance(stride, int):
        stride = (stride,) * 3
    if min(stride) < 1:
        raise ShapeError(f"stride 必须 ≥ 1: {tuple(stride)}")
    for p, n in zip(patch_size, dims):
        if p > n:
            raise ShapeError(f"块大小 {tuple(patch_size)} 超过体数据尺寸 {tuple(dims)}")
    per_axis = [_axis_centers(int(n), int(p), int(s)) for n, p, s in zip(dims, patch_size, stride)]
    return [(cx, cy, cz) for cx in per_axis[0] for cy in per_axis[1] for cz in per_axis[2]]


def stitch_patches(patch_logits: Sequence[np.ndarray], centers: Sequence[Sequence[int]],
                   dims: Sequence[int], channels: int, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """
    把各块的 logits 拼回整体，重叠体素取算术平均

    Raises:
        ShapeError: 块大小/通道数不一致，或存在未被覆盖的体素
    """
    if len(patch_logits) != len(centers) or not patch_logits:
        raise ShapeError("块数量与中心数量不一致或为空")
    first = np.asarray(patch_logits[0])
    if first.shape[0] != channels:
        raise ShapeError(f"块通道数 {first.shape[0]} ≠ {channels}")
    size = first.shape[1:]
    dims = tuple(int(n) for n in dims)

    total = np.zeros((channels,) + dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for patch, center in zip(patch_logits, centers):
        patch = np.asarray(patch)
        if patch.shape != first.shape:
            raise ShapeError(f"块形状不一致: {patch.shape} vs {first.shape}")
        sx, sy, sz = PatchSpec(tuple(center), size).slices(dims)
        total[:, sx, sy, sz] += patch
        count[sx, sy, sz] += 1

    if np.any(count == 0):
        raise ShapeError(f"存在 {int(np.sum(count == 0))} 个未被任何块覆盖的体素")
    return Volume((total / count).astype(np.float32), spacing)
