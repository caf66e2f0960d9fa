#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
轻量张量引擎
基于 numpy 的稠密张量与反向模式自动微分，只覆盖三维 U-Net 所需的算子，
另含广义 Dice 损失、Adam 优化器、学习率调度与检查点读写

张量不带 batch 维度：体数据形状为 (C, X, Y, Z)
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from errors import AutogradError, ShapeError, VolumeFormatError
from utils import ensure_directory, read_key_value_file, write_key_value_file
from volcore import Volume, read_volume, write_volume

_DEFAULT_DTYPE = np.float32


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """设置新建张量的数值精度（float32 用于训练，float64 用于梯度校验）"""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"只支持 float32/float64: {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def default_dtype(dtype):
    """临时切换数值精度"""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


# ==================== 张量与计算图 ====================

class Tensor:
    """参与反向模式计算图的多维数组"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward', '_released')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._released = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.name = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._released = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() 需要标量张量，得到形状 {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """常量数组包装为不求导张量"""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


def _topological_order(root: Tensor) -> List[Tensor]:
    """迭代式 DFS 拓扑排序，顺序只取决于图结构"""
    order: List[Tensor] = []
    state: Dict[int, int] = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        status = state.get(key, 0)
        if status == 2:
            continue
        if status == 1:
            raise AutogradError("计算图中检测到环")
        state[key] = 1
        stack.append((node, True))
        for parent in reversed(node._parents):
            pstatus = state.get(id(parent), 0)
            if pstatus == 1:
                raise AutogradError("计算图中检测到环")
            if pstatus == 0:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    对标量损失做反向传播，梯度累加到所有 requires_grad 的叶子张量的 .grad

    每个计算图只能反向一次，之后中间结果被释放

    Raises:
        AutogradError: 非标量、重复反向或图中存在环
    """
    if loss.data.size != 1:
        raise AutogradError(f"backward 需要标量损失，得到形状 {loss.shape}")
    if loss._released:
        raise AutogradError("该计算图已反向传播过一次，需重新前向计算")
    if not loss.requires_grad:
        raise AutogradError("损失不依赖任何需要梯度的张量")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        if node._released:
            raise AutogradError("计算图包含已释放的中间结果")
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if not node.is_leaf:
            node._released = True
            node._backward = None
            node._parents = ()
    loss._released = True


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ==================== 逐元素算子 ====================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._from_op(a.data + b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor._from_op(a.data * b.data, (a, b), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def _backward(g):
        return (g * factor,)
    return Tensor._from_op(x.data * x.data.dtype.type(factor), (x,), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _backward(g):
        return (g * mask,)
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), _backward)


def sum_all(x: Tensor) -> Tensor:
    def _backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), _backward)


def weighted_sum(xs: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Σ_k weights[k]·xs[k]（同形状），按下标顺序累加"""
    if len(xs) != len(weights) or not xs:
        raise ShapeError(f"张量数 {len(xs)} 与权重数 {len(weights)} 不一致")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"weighted_sum 形状不一致: {x.shape} vs {shape}")
    out = np.zeros(shape, dtype=xs[0].data.dtype)
    for x, w in zip(xs, weights):
        out = out + x.data * x.data.dtype.type(w)

    def _backward(g):
        return tuple(g * w for w in weights)
    return Tensor._from_op(out, tuple(xs), _backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """沿通道轴拼接"""
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat 形状不匹配: {[x.shape for x in xs]}") from e
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._from_op(data, xs, _backward)


def mean_over(xs: Sequence[Tensor]) -> Tensor:
    """
    多个同形状张量的算术平均，按下标顺序累加

    float32 输入在 float64 中累加，重复输入时结果与单个输入逐位相同
    """
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("mean_over 需要至少一个输入")
    shape, dtype = xs[0].shape, xs[0].data.dtype
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"mean_over 形状不一致: {x.shape} vs {shape}")
    acc_dtype = np.float64 if dtype == np.float32 else dtype
    total = np.zeros(shape, dtype=acc_dtype)
    for x in xs:
        total += x.data
    k = len(xs)
    out = (total / k).astype(dtype)

    def _backward(g):
        share = (g / k).astype(dtype)
        return tuple(share for _ in xs)
    return Tensor._from_op(out, xs, _backward)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return Tensor._from_op(s, (x,), _backward)


# ==================== 卷积 ====================

def _im2col(xp: np.ndarray, k: int, stride: int, out_dims: Tuple[int, int, int]) -> np.ndarray:
    """(C, Xp, Yp, Zp) -> (D·H·W, C·k³)"""
    c = xp.shape[0]
    d, h, w = out_dims
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride][:, :d, :h, :w]
    return win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(d * h * w, c * k * k * k)


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], k: int, stride: int,
            out_dims: Tuple[int, int, int]) -> np.ndarray:
    """_im2col 的伴随：把列散射累加回填充后的体数据"""
    c = padded_shape[0]
    d, h, w = out_dims
    cols = cols.reshape(d, h, w, c, k, k, k)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                xp[:, i:i + stride * d:stride, j:j + stride * h:stride, l:l + stride * w:stride] += \
                    cols[:, :, :, :, i, j, l].transpose(3, 0, 1, 2)
    return xp


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding: int = 1, stride: int = 1) -> Tensor:
    """
    三维互相关

    Args:
        x: (C_in, X, Y, Z)
        w: (C_out, C_in, k, k, k)
        b: (C_out,) 或 None
        padding: 各边零填充
        stride: 步长
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv3d 需要 x:(C,X,Y,Z) w:(O,C,k,k,k)，得到 {x.shape} / {w.shape}")
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ShapeError(f"只支持立方卷积核: {w.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"通道数不匹配: 输入 {x.shape[0]}，卷积核 {c_in}")
    dims_in = x.shape[1:]
    out_dims = tuple((n + 2 * padding - k) // stride + 1 for n in dims_in)
    if min(out_dims) < 1:
        raise ShapeError(f"输入 {dims_in} 对卷积核 {k} 太小")

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, stride, out_dims)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape((c_out,) + out_dims)
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(-1, 1, 1, 1)
        parents.append(b)

    def _backward(g):
        gm = g.reshape(c_out, -1)
        dw = (gm @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _col2im(gm.T @ wmat, xp.shape, k, stride, out_dims)
            dx = dxp[:, p:p + dims_in[0], p:p + dims_in[1], p:p + dims_in[2]] if p else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(gm.sum(axis=1))
        return tuple(grads)
    return Tensor._from_op(out, parents, _backward)


def conv_transpose3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2,
                     padding: int = 1, output_padding: int = 1) -> Tensor:
    """
    三维转置卷积（步长 stride 卷积的伴随）；默认参数下空间尺寸恰好翻倍

    Args:
        x: (C_in, D, H, W)
        w: (C_in, C_out, k, k, k)
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv_transpose3d 需要 x:(C,X,Y,Z) w:(C,O,k,k,k)，得到 {x.shape} / {w.shape}")
    c_in, c_out, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != c_in:
        raise ShapeError(f"通道数不匹配: 输入 {x.shape[0]}，卷积核 {c_in}")
    dims_in = x.shape[1:]
    buf_shape = (c_out,) + tuple((n - 1) * stride + k + output_padding for n in dims_in)
    out_dims = tuple((n - 1) * stride - 2 * padding + k + output_padding for n in dims_in)
    p = padding

    xmat = x.data.reshape(c_in, -1)
    wmat = w.data.reshape(c_in, -1)
    buf = _col2im(xmat.T @ wmat, buf_shape, k, stride, dims_in)
    out = buf[:, p:p + out_dims[0], p:p + out_dims[1], p:p + out_dims[2]]
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(-1, 1, 1, 1)
        parents.append(b)
    out = np.ascontiguousarray(out)

    def _backward(g):
        gbuf = np.zeros(buf_shape, dtype=g.dtype)
        gbuf[:, p:p + out_dims[0], p:p + out_dims[1], p:p + out_dims[2]] = g
        gcols = _im2col(gbuf, k, stride, dims_in)
        dx = (gcols @ wmat.T).T.reshape(x.shape) if x.requires_grad else None
        dw = (xmat @ gcols).reshape(w.shape) if w.requires_grad else None
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)
    return Tensor._from_op(out, parents, _backward)


def maxpool3d(x: Tensor, size: int = 2) -> Tensor:
    """不重叠最大池化，平局时梯度给块内线性下标最小的元素"""
    c = x.shape[0]
    dims = x.shape[1:]
    if any(n % size for n in dims):
        raise ShapeError(f"maxpool3d 需要空间尺寸可被 {size} 整除: {dims}")
    d, h, w = (n // size for n in dims)
    blocks = x.data.reshape(c, d, size, h, size, w, size).transpose(0, 1, 3, 5, 2, 4, 6)
    blocks = blocks.reshape(c, d, h, w, size ** 3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, d, h, w, size, size, size).transpose(0, 1, 4, 2, 5, 3, 6)
        return (gb.reshape(x.shape),)
    return Tensor._from_op(out, (x,), _backward)


# ==================== 批归一化 ====================

@dataclass
class BatchNormState:
    """批归一化的滑动统计量"""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=_DEFAULT_DTYPE), np.ones(channels, dtype=_DEFAULT_DTYPE), momentum)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool = True, eps: float = 1e-5) -> Tensor:
    """
    三维批归一化（batch=1：统计量取自每个通道的全部空间位置）

    训练模式使用当前统计量并以 momentum 更新滑动均值/方差（总体方差）；
    推理模式使用滑动统计量。常数通道在仿射变换前输出 0
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm 参数形状应为 ({c},)")
    dtype = x.data.dtype
    axes = (1, 2, 3)
    g4 = gamma.data.reshape(-1, 1, 1, 1)

    if training:
        n = x.data[0].size
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered ** 2).mean(axis=axes, keepdims=True)
        tiny = (64 * np.finfo(dtype).eps * np.maximum(1.0, np.abs(mu))) ** 2
        constant = var <= tiny
        inv_std = np.where(constant, 0.0, 1.0 / np.sqrt(var + eps)).astype(dtype)
        xhat = centered * inv_std
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var.reshape(-1)).astype(state.running_var.dtype)

        def _backward(g):
            dxhat = g * g4
            dx = None
            if x.requires_grad:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (inv_std / n) * (n * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(dtype).reshape(-1, 1, 1, 1)
        xhat = (x.data - state.running_mean.reshape(-1, 1, 1, 1)) * inv_std

        def _backward(g):
            return g * g4 * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * g4 + beta.data.reshape(-1, 1, 1, 1)).astype(dtype)
    return Tensor._from_op(out, (x, gamma, beta), _backward)


# ==================== 损失 ====================

def generalized_dice_loss(pred: Tensor, gt_onehot: np.ndarray, eps: float = 1e-5) -> Tensor:
    """
    广义 Dice 损失（体积加权）

    loss = 1 − (2·Σ_l w_l Σ_n p_ln g_ln + ε) / (Σ_l w_l Σ_n (p_ln + g_ln) + ε)，
    w_l = 1/(Σ_n g_ln + ε)²；真值中不存在的标签权重为 0

    Args:
        pred: softmax 概率 (L, ...)
        gt_onehot: 真值 one-hot (L, ...)
    """
    gt = np.asarray(gt_onehot, dtype=pred.data.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"预测 {pred.shape} 与真值 {gt.shape} 形状不一致")
    axes = tuple(range(1, gt.ndim))
    g_vol = gt.sum(axis=axes)
    weights = np.where(g_vol > 0, 1.0 / (g_vol + eps) ** 2, 0.0)
    w = weights.reshape((-1,) + (1,) * len(axes))
    numer = float((weights * (pred.data * gt).sum(axis=axes)).sum())
    denom = float((weights * (pred.data + gt).sum(axis=axes)).sum())
    loss = 1.0 - (2.0 * numer + eps) / (denom + eps)

    def _backward(g):
        grad = -w * (2.0 * gt * (denom + eps) - (2.0 * numer + eps)) / (denom + eps) ** 2
        return ((g * grad).astype(pred.data.dtype),)
    return Tensor._from_op(np.asarray(loss, dtype=pred.data.dtype), (pred,), _backward)


# ==================== 优化器 ====================

class OptimConfig(BaseModel):
    """Adam 与阶梯学习率调度配置"""

    model_config = ConfigDict(extra='forbid')

    lr0: float = Field(5e-4, gt=0)
    decay_factor: float = Field(0.2, gt=0, lt=1)
    decay_every_epochs: int = Field(2, ge=1)
    decay_start_epoch: int = Field(4, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    @classmethod
    def dlf_preset(cls) -> "OptimConfig":
        return cls(decay_every_epochs=2, decay_start_epoch=4)

    @classmethod
    def unet_preset(cls) -> "OptimConfig":
        return cls(decay_every_epochs=4, decay_start_epoch=9)


def lr_schedule(cfg: OptimConfig, epoch: int) -> float:
    """
    第 epoch 轮（从 1 开始）的学习率：从 decay_start_epoch 起每 decay_every_epochs 轮乘以 decay_factor
    """
    if epoch < 1:
        raise ValueError(f"epoch 从 1 开始: {epoch}")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    steps = (epoch - cfg.decay_start_epoch) // cfg.decay_every_epochs + 1
    return cfg.lr0 * cfg.decay_factor ** steps


@dataclass
class AdamState:
    """Adam 一阶/二阶矩与步数"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, cfg: OptimConfig) -> None:
    """
    带偏差修正的 Adam 更新（原地修改参数与状态，state.t 自增）

    Args:
        params: 名称 -> 参数张量
        grads: 名称 -> 梯度（缺失或 None 视为 0）
        state: 优化器状态
        lr: 当前学习率
        cfg: 优化器配置
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype)
        state.m[name] = m.astype(p.data.dtype)
        state.v[name] = v.astype(p.data.dtype)


# ==================== 梯度校验 ====================

def gradcheck(fn: Callable[[], Tensor], tensors: Dict[str, Tensor], step: float = 1e-3,
              max_checks: int = 20, rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    中心差分梯度校验

    对每个张量随机抽取至多 max_checks 个元素，比较解析梯度与
    (f(x+h) − f(x−h)) / 2h；相对误差 = max|解析−数值| / max(max|数值|, 1e-10)

    Args:
        fn: 无参函数，每次调用重新前向并返回标量损失
        tensors: 需要校验的叶子张量
        step: 差分步长

    Returns:
        名称 -> 相对误差
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors.values():
        t.zero_grad()
    backward(fn())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors.items()}

    errors = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        count = min(max_checks, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        numeric = np.zeros(count)
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2 * step)
        ana = analytic[name].reshape(-1)[picks]
        scale_ = max(float(np.max(np.abs(numeric))), 1e-10)
        errors[name] = float(np.max(np.abs(ana - numeric))) / scale_
    return errors


# ==================== 检查点 ====================

def save_checkpoint(path, arrays: Dict[str, np.ndarray], extra: Optional[Dict[str, object]] = None) -> Path:
    """
    写出检查点目录：manifest.txt（名称、形状、元素数）+ 每个参数一个 float32 DLFV 文件
    （C=1，dims=(count,1,1)）+ 可选 config.txt

    Args:
        path: 检查点目录
        arrays: 名称 -> 数组（按字典顺序写出）
        extra: 模型配置键值
    """
    path = ensure_directory(path)
    ensure_directory(path / "params")
    lines = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        count = int(arr.size)
        shape = ','.join(str(n) for n in arr.shape) if arr.ndim else ''
        lines.append(f"{name}\t{shape}\t{count}")
        write_volume(Volume(arr.reshape(1, count, 1, 1)), path / "params" / f"{name}.dlfv")
    (path / "manifest.txt").write_text('\n'.join(lines) + '\n', encoding='utf-8')
    if extra is not None:
        write_key_value_file(path / "config.txt", extra)
    logger.info(f"检查点已保存: {path} ({len(arrays)} 个数组)")
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """
    读取检查点目录

    Returns:
        (名称 -> float32 数组, config.txt 键值；不存在时为空字典)
    """
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise VolumeFormatError(f"{path}: 缺少 manifest.txt")
    arrays: Dict[str, np.ndarray] = {}
    for line in manifest.read_text(encoding='utf-8').splitlines():
        if not line.strip():
            continue
        name, shape_text, count_text = line.split('\t')
        shape = tuple(int(n) for n in shape_text.split(',')) if shape_text else ()
        vol = read_volume(path / "params" / f"{name}.dlfv")
        flat = vol.data.reshape(-1)
        if flat.size != int(count_text) or int(np.prod(shape)) != flat.size:
            raise VolumeFormatError(f"{path}: 参数 {name} 元素数不一致")
        arrays[name] = flat.reshape(shape)
    extra = read_key_value_file(path / "config.txt") if (path / "config.txt").exists() else {}
    return arrays, extra
