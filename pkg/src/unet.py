#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
三维 U-Net 构建模块
同一套结构用于三处：加权投票子网（3 级）、微调子网（4 级）和直接 U-Net 基线

结构：
  每个下采样级: (3³ 卷积 → BN → ReLU) ×2 → 2³ 最大池化
  每个上采样级: 3³ 转置卷积(步长 2) → 与同级编码特征拼接 → (3³ 卷积 → BN → ReLU) ×2
  末端: 1³ 卷积输出 out_channels
  深监督: 第 k 个辅助头读取第 k 级解码输出（k = levels 时读取最深的池化特征）
"""

from pathlib import Path
from typing import Dict, List

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

import gridnet as gn
from errors import ShapeError
from gridnet import BatchNormState, Tensor

DEFAULT_DS_WEIGHTS = [1.0, 0.5, 0.2, 0.1]


class UNetConfig(BaseModel):
    """U-Net 结构配置"""

    model_config = ConfigDict(extra='forbid')

    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    levels: int = Field(3, ge=1)
    base_features: int = Field(8, ge=1)
    deep_supervision: bool = False
    ds_weights: List[float] = Field(default_factory=lambda: list(DEFAULT_DS_WEIGHTS))
    bn_momentum: float = Field(0.1, gt=0, le=1)

    @field_validator('ds_weights')
    @classmethod
    def _check_weights(cls, v):
        if not v or any(w < 0 for w in v):
            raise ValueError(f"ds_weights 必须非空且非负: {v}")
        return v

    def features(self, level: int) -> int:
        """第 level 级的特征图数（逐级翻倍）"""
        return self.base_features * 2 ** level

    @property
    def n_heads(self) -> int:
        """输出头个数（主输出 + 辅助头）"""
        if not self.deep_supervision:
            return 1
        return min(len(self.ds_weights), self.levels + 1)


class UNetOutput:
    """前向结果：主输出 logits 与各级辅助 logits（第 k 个空间尺寸为输入的 1/2^k）"""

    def __init__(self, logits: Tensor, aux: List[Tensor]):
        self.logits = logits
        self.aux = aux

    @property
    def heads(self) -> List[Tensor]:
        return [self.logits] + list(self.aux)


class UNetModel:
    """U-Net 参数集合与前向计算"""

    def __init__(self, cfg: UNetConfig, params: Dict[str, Tensor], bn_states: Dict[str, BatchNormState]):
        self.cfg = cfg
        self.params = params
        self.bn_states = bn_states

    # ---------- 参数 ----------

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        """全部可保存状态：参数 + BN 滑动统计量"""
        arrays = {f"{prefix}{name}": t.data for name, t in self.params.items()}
        for name, st in self.bn_states.items():
            arrays[f"{prefix}{name}.running_mean"] = st.running_mean
            arrays[f"{prefix}{name}.running_var"] = st.running_var
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        dtype = gn.get_default_dtype()
        for name, t in self.params.items():
            key = f"{prefix}{name}"
            if key not in arrays:
                raise ShapeError(f"检查点缺少参数 {key}")
            if arrays[key].shape != t.shape:
                raise ShapeError(f"参数 {key} 形状不一致: {arrays[key].shape} vs {t.shape}")
            t.data = np.array(arrays[key], dtype=dtype)
        for name, st in self.bn_states.items():
            st.running_mean = np.array(arrays[f"{prefix}{name}.running_mean"], dtype=dtype)
            st.running_var = np.array(arrays[f"{prefix}{name}.running_var"], dtype=dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # ---------- 前向 ----------

    def _cbr(self, h: Tensor, name: str, training: bool) -> Tensor:
        p = self.params
        h = gn.conv3d(h, p[f"{name}.weight"], p[f"{name}.bias"], padding=1)
        h = gn.batchnorm3d(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], self.bn_states[f"{name}.bn"], training)
        return gn.relu(h)

    def forward(self, x: Tensor, training: bool = True) -> UNetOutput:
        """
        Args:
            x: (in_channels, X, Y, Z)，空间尺寸须可被 2^levels 整除
            training: 训练模式（BN 使用当前统计量）
        """
        cfg = self.cfg
        if x.shape[0] != cfg.in_channels:
            raise ShapeError(f"输入通道 {x.shape[0]} ≠ in_channels={cfg.in_channels}")
        factor = 2 ** cfg.levels
        if any(n % factor for n in x.shape[1:]):
            raise ShapeError(f"空间尺寸 {x.shape[1:]} 不能被 2^{cfg.levels}={factor} 整除")

        p = self.params
        skips = []
        h = x
        for i in range(cfg.levels):
            h = self._cbr(h, f"enc{i}.conv0", training)
            h = self._cbr(h, f"enc{i}.conv1", training)
            skips.append(h)
            h = gn.maxpool3d(h, 2)
        bottom = h

        decoded: Dict[int, Tensor] = {}
        for i in reversed(range(cfg.levels)):
            h = gn.conv_transpose3d(h, p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"], stride=2)
            h = gn.concat([h, skips[i]], axis=0)
            h = self._cbr(h, f"dec{i}.conv0", training)
            h = self._cbr(h, f"dec{i}.conv1", training)
            decoded[i] = h

        logits = gn.conv3d(h, p["head.weight"], p["head.bias"], padding=0)
        aux = []
        for k in range(1, cfg.n_heads):
            feat = decoded[k] if k < cfg.levels else bottom
            aux.append(gn.conv3d(feat, p[f"aux{k}.weight"], p[f"aux{k}.bias"], padding=0))
        return UNetOutput(logits, aux)


def unet_forward(model: UNetModel, x: Tensor, training: bool = True) -> UNetOutput:
    """函数式入口，等价于 model.forward"""
    return model.forward(x, training)


def build_unet(cfg: UNetConfig, rng: np.random.Generator) -> UNetModel:
    """
    按配置构建 U-Net 参数

    卷积核按 He 方式以 fan-in 缩放初始化，偏置为 0，BN 的 γ=1、β=0；
    随机数先以 float64 生成再转换为当前精度，同一种子在两种精度下取值一致
    """
    dtype = gn.get_default_dtype()
    params: Dict[str, Tensor] = {}
    bn_states: Dict[str, BatchNormState] = {}

    def conv(name: str, c_in: int, c_out: int, k: int):
        std = np.sqrt(2.0 / (c_in * k ** 3))
        params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k, k)).astype(dtype),
                                          requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def conv_bn(name: str, c_in: int, c_out: int):
        conv(name, c_in, c_out, 3)
        params[f"{name}.bn.gamma"] = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bn.gamma")
        params[f"{name}.bn.beta"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bn.beta")
        bn_states[f"{name}.bn"] = BatchNormState(np.zeros(c_out, dtype=dtype), np.ones(c_out, dtype=dtype),
                                                 cfg.bn_momentum)

    c_in = cfg.in_channels
    for i in range(cfg.levels):
        conv_bn(f"enc{i}.conv0", c_in, cfg.features(i))
        conv_bn(f"enc{i}.conv1", cfg.features(i), cfg.features(i))
        c_in = cfg.features(i)

    for i in reversed(range(cfg.levels)):
        f = cfg.features(i)
        std = np.sqrt(2.0 / (c_in * 27))
        params[f"dec{i}.up.weight"] = Tensor(rng.normal(0.0, std, (c_in, f, 3, 3, 3)).astype(dtype),
                                             requires_grad=True, name=f"dec{i}.up.weight")
        params[f"dec{i}.up.bias"] = Tensor(np.zeros(f, dtype=dtype), requires_grad=True, name=f"dec{i}.up.bias")
        conv_bn(f"dec{i}.conv0", 2 * f, f)
        conv_bn(f"dec{i}.conv1", f, f)
        c_in = f

    conv("head", cfg.features(0), cfg.out_channels, 1)
    for k in range(1, cfg.n_heads):
        feat_channels = cfg.features(k) if k < cfg.levels else cfg.features(cfg.levels - 1)
        conv(f"aux{k}", feat_channels, cfg.out_channels, 1)

    model = UNetModel(cfg, params, bn_states)
    logger.debug(f"构建 U-Net: levels={cfg.levels} base={cfg.base_features} "
                 f"in={cfg.in_channels} out={cfg.out_channels} 参数量={model.parameter_count()}")
    return model


def downsample_nearest(labels: np.ndarray, factor: int) -> np.ndarray:
    """标签图最近邻下采样：取每个 factor³ 块中偏移 factor//2 处的体素"""
    if factor == 1:
        return labels
    off = factor // 2
    return labels[off::factor, off::factor, off::factor]


def config_to_items(cfg: UNetConfig, prefix: str) -> Dict[str, object]:
    """UNetConfig 转为 key=value 条目"""
    items = {}
    for key, value in cfg.model_dump().items():
        if isinstance(value, list):
            value = ','.join(repr(float(v)) for v in value)
        items[f"{prefix}{key}"] = value
    return items


def config_from_items(items: Dict[str, str], prefix: str) -> UNetConfig:
    """从 key=value 条目还原 UNetConfig"""
    raw = {k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)}
    if 'ds_weights' in raw:
        raw['ds_weights'] = [float(v) for v in raw['ds_weights'].split(',') if v]
    if 'deep_supervision' in raw:
        raw['deep_supervision'] = raw['deep_supervision'] in ('True', 'true', '1')
    return UNetConfig(**raw)


def save_model(model: UNetModel, path) -> Path:
    """保存直接 U-Net 基线模型"""
    extra = {'model': 'unet'}
    extra.update(config_to_items(model.cfg, 'unet.'))
    return gn.save_checkpoint(path, model.state_arrays(), extra)


def load_model(path) -> UNetModel:
    """读取直接 U-Net 基线模型"""
    arrays, extra = gn.load_checkpoint(path)
    if extra.get('model') != 'unet':
        raise ShapeError(f"{path} 不是 U-Net 检查点 (model={extra.get('model')})")
    cfg = config_from_items(extra, 'unet.')
    model = build_unet(cfg, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    return model
