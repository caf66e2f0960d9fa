#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
深度标签融合（DLF）模型
加权投票子网逐图谱预测标签权重图 → 投票图 v = w·s → 图谱平均得到 S_init →
微调子网修正 → 乘以图谱掩膜 → argmax；带三个消融开关
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

import gridnet as gn
from errors import ShapeError
from gridnet import Tensor
from unet import (DEFAULT_DS_WEIGHTS, UNetConfig, UNetModel, build_unet, config_from_items,
                  config_to_items, downsample_nearest)
from utils import ordered_map
from volcore import AtlasBundle, LabelMap, Volume, one_hot

# 加权投票子网输入: 目标 T1/T2 + 图谱 T1/T2 + 三个坐标通道
WV_IN_CHANNELS = 7
N_COORD_CHANNELS = 3


class DlfConfig(BaseModel):
    """DLF 模型配置"""

    model_config = ConfigDict(extra='forbid')

    n_labels: int = Field(..., ge=2)
    base_features: int = Field(8, ge=1)
    wv_levels: int = Field(3, ge=1)
    ft_levels: int = Field(3, ge=1)
    mask_threshold: float = Field(0.2, ge=0, le=1)
    ds_weights: List[float] = Field(default_factory=lambda: list(DEFAULT_DS_WEIGHTS))
    ablate_wv: bool = False
    ablate_ft: bool = False
    ablate_mask: bool = False
    wv_cfg: Optional[UNetConfig] = None
    ft_cfg: Optional[UNetConfig] = None

    @model_validator(mode='after')
    def _fill_subnets(self):
        if self.wv_cfg is None:
            self.wv_cfg = UNetConfig(in_channels=WV_IN_CHANNELS, out_channels=self.n_labels,
                                     levels=self.wv_levels, base_features=self.base_features,
                                     deep_supervision=False, ds_weights=self.ds_weights)
        if self.ft_cfg is None:
            self.ft_cfg = UNetConfig(in_channels=self.n_labels + N_COORD_CHANNELS, out_channels=self.n_labels,
                                     levels=self.ft_levels, base_features=self.base_features,
                                     deep_supervision=True, ds_weights=self.ds_weights)
        if self.wv_cfg.out_channels != self.n_labels or self.ft_cfg.out_channels != self.n_labels:
            raise ValueError("两个子网的 out_channels 必须等于 n_labels")
        if self.wv_cfg.in_channels != WV_IN_CHANNELS:
            raise ValueError(f"加权投票子网输入通道必须为 {WV_IN_CHANNELS}")
        if self.ft_cfg.in_channels != self.n_labels + N_COORD_CHANNELS:
            raise ValueError(f"微调子网输入通道必须为 n_labels+{N_COORD_CHANNELS}")
        return self

    @classmethod
    def full_scale_preset(cls, n_labels: int = 15) -> "DlfConfig":
        """全尺寸配置：32 个初始特征图，微调子网 4 级"""
        return cls(n_labels=n_labels, base_features=32, wv_levels=3, ft_levels=4)

    @property
    def divisor(self) -> int:
        """块尺寸必须整除的数"""
        levels = []
        if not self.ablate_wv:
            levels.append(self.wv_levels)
        if not self.ablate_ft:
            levels.append(self.ft_levels)
        return 2 ** max(levels) if levels else 1

    def with_ablations(self, drop: Sequence[str]) -> "DlfConfig":
        """按名称（wv / ft / mask）打开消融开关"""
        update = {}
        for name in drop:
            if name not in ('wv', 'ft', 'mask'):
                raise ValueError(f"未知消融组件: {name}")
            update[f"ablate_{name}"] = True
        return self.model_copy(update=update)


@dataclass
class FusionIntermediates:
    """前向中间量：权重图 W、候选 one-hot S、投票图 V、S_init 与图谱掩膜"""

    W: List[Optional[Tensor]]
    S: List[np.ndarray]
    V: List[Tensor]
    S_init: Tensor
    masks: np.ndarray


@dataclass
class DlfOutput:
    """DLF 前向结果"""

    labels: np.ndarray
    logits: Tensor
    aux: List[Tensor]
    intermediates: FusionIntermediates

    def label_map(self, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
        return LabelMap(self.labels, self.logits.shape[0], spacing)


class DlfModel:
    """DLF 模型：共享的加权投票子网 + 微调子网"""

    def __init__(self, cfg: DlfConfig, wv: UNetModel, ft: UNetModel):
        self.cfg = cfg
        self.wv = wv
        self.ft = ft

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"wv.{k}": v for k, v in self.wv.parameters().items()}
        params.update({f"ft.{k}": v for k, v in self.ft.parameters().items()})
        return params

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = self.wv.state_arrays("wv.")
        arrays.update(self.ft.state_arrays("ft."))
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.wv.load_state_arrays(arrays, "wv.")
        self.ft.load_state_arrays(arrays, "ft.")

    def zero_grad(self) -> None:
        self.wv.zero_grad()
        self.ft.zero_grad()

    def with_config(self, cfg: DlfConfig) -> "DlfModel":
        """共享参数、替换开关（用于消融推理）"""
        return DlfModel(cfg, self.wv, self.ft)


def build_dlf(cfg: DlfConfig, rng: np.random.Generator) -> DlfModel:
    """构建 DLF 模型（先加权投票子网，后微调子网）"""
    wv = build_unet(cfg.wv_cfg, rng)
    ft = build_unet(cfg.ft_cfg, rng)
    logger.debug(f"构建 DLF: L={cfg.n_labels} 参数量={wv.parameter_count() + ft.parameter_count()}")
    return DlfModel(cfg, wv, ft)


def compose_votes(W: Tensor, S) -> Tensor:
    """投票图 v_ln = w_ln·s_ln"""
    S = gn.as_tensor(S)
    if W.shape != S.shape:
        raise ShapeError(f"权重图 {W.shape} 与候选 one-hot {S.shape} 形状不一致")
    return gn.mul(W, S)


def average_votes(V_list: Sequence[Tensor]) -> Tensor:
    """S_init = 各图谱投票图的算术平均（按图谱下标顺序累加）"""
    if not V_list:
        raise ShapeError("average_votes 需要至少一个图谱")
    return gn.mean_over(V_list)


def atlas_mask(S_list: Sequence[np.ndarray], tau: float) -> np.ndarray:
    """
    图谱掩膜：mask_l(n) = 1 当且仅当候选投票均值 ≥ τ；背景通道恒为 1
    """
    if not S_list:
        raise ShapeError("atlas_mask 需要至少一个图谱")
    total = np.zeros(S_list[0].shape, dtype=np.float64)
    for s in S_list:
        total += s
    mean = total / len(S_list)
    mask = (mean >= tau).astype(gn.get_default_dtype())
    mask[0] = 1
    return mask


def dlf_forward(model: DlfModel, target: Volume, coords: Volume, atlases: Sequence[AtlasBundle],
                training: bool = False, workers: int = 1) -> DlfOutput:
    """
    DLF 前向

    Args:
        model: DLF 模型
        target: 目标图像块 (2, X, Y, Z)
        coords: 坐标图块 (3, X, Y, Z)
        atlases: 已配准到目标网格的图谱块
        training: 训练模式（BN 使用当前统计量）
        workers: 推理模式下加权投票子网的并行线程数

    Raises:
        ShapeError: 没有图谱或空间尺寸不可整除
    """
    cfg = model.cfg
    n_labels = cfg.n_labels
    if not atlases:
        raise ShapeError("dlf_forward 需要至少一个图谱")
    dims = target.dims
    if any(n % cfg.divisor for n in dims):
        raise ShapeError(f"空间尺寸 {dims} 不能被 {cfg.divisor} 整除")
    if coords.dims != dims or any(a.images.dims != dims for a in atlases):
        raise ShapeError("目标、坐标图与图谱块尺寸必须一致")

    S = [one_hot(a.labels, n_labels).data.astype(gn.get_default_dtype()) for a in atlases]
    coords_t = Tensor(coords.data)

    if cfg.ablate_wv:
        W: List[Optional[Tensor]] = [None] * len(atlases)
        V = [gn.as_tensor(s) for s in S]
    else:
        target_t = Tensor(target.data)

        def weight_map(atlas: AtlasBundle) -> Tensor:
            x = gn.concat([target_t, Tensor(atlas.images.data), coords_t], axis=0)
            return model.wv.forward(x, training).logits

        W = ordered_map(weight_map, atlases, 1 if training else workers)
        V = [compose_votes(w, s) for w, s in zip(W, S)]

    S_init = average_votes(V)
    masks = np.ones((n_labels,) + dims, dtype=gn.get_default_dtype()) if cfg.ablate_mask \
        else atlas_mask(S, cfg.mask_threshold)

    if cfg.ablate_ft:
        feats, aux = S_init, []
    else:
        out = model.ft.forward(gn.concat([S_init, coords_t], axis=0), training)
        feats, aux = out.logits, out.aux

    # 屏蔽标签的 logit 为 0，允许标签的 logit 全部 ≤ 0 时仍可能被 argmax 选中
    logits = gn.mul(feats, masks)
    labels = np.argmax(logits.data, axis=0).astype(np.int32)
    return DlfOutput(labels, logits, aux, FusionIntermediates(W, S, V, S_init, masks))


def deep_supervision_loss(main_logits: Tensor, aux_logits: Sequence[Tensor], gt: np.ndarray,
                          weights: Sequence[float], n_labels: Optional[int] = None) -> Tensor:
    """
    深监督损失 Σ_k weight_k · GDL(softmax(logits_k), gt_k)，gt_k 为最近邻下采样 2^k 倍的真值

    Args:
        main_logits: 主输出 (L, X, Y, Z)
        aux_logits: 辅助输出，第 k 个为 1/2^k 分辨率
        gt: 真值标签 (X, Y, Z)
        weights: 各级权重，个数须等于 1 + len(aux_logits)
    """
    heads = [main_logits] + list(aux_logits)
    if len(weights) != len(heads):
        raise ShapeError(f"深监督权重数 {len(weights)} ≠ 输出级数 {len(heads)}")
    n_labels = n_labels or main_logits.shape[0]
    losses = []
    for k, logits in enumerate(heads):
        gt_k = downsample_nearest(np.asarray(gt), 2 ** k)
        if gt_k.shape != logits.shape[1:]:
            raise ShapeError(f"第 {k} 级输出 {logits.shape[1:]} 与下采样真值 {gt_k.shape} 尺寸不一致")
        onehot = one_hot(LabelMap(gt_k, n_labels), n_labels).data
        losses.append(gn.generalized_dice_loss(gn.softmax(logits, axis=0), onehot))
    return gn.weighted_sum(losses, weights)


def dlf_loss(model: DlfModel, output: DlfOutput, gt: np.ndarray) -> Tensor:
    """训练损失：微调子网各输出头的深监督损失（消融微调子网时只有主输出）"""
    heads = 1 + len(output.aux)
    return deep_supervision_loss(output.logits, output.aux, gt, model.cfg.ds_weights[:heads], model.cfg.n_labels)


# ==================== 检查点 ====================

def config_items(cfg: DlfConfig) -> Dict[str, object]:
    items: Dict[str, object] = {
        'model': 'dlf',
        'dlf.n_labels': cfg.n_labels,
        'dlf.base_features': cfg.base_features,
        'dlf.wv_levels': cfg.wv_levels,
        'dlf.ft_levels': cfg.ft_levels,
        'dlf.mask_threshold': repr(float(cfg.mask_threshold)),
        'dlf.ds_weights': ','.join(repr(float(w)) for w in cfg.ds_weights),
        'dlf.ablate_wv': cfg.ablate_wv,
        'dlf.ablate_ft': cfg.ablate_ft,
        'dlf.ablate_mask': cfg.ablate_mask,
    }
    items.update(config_to_items(cfg.wv_cfg, 'wv.'))
    items.update(config_to_items(cfg.ft_cfg, 'ft.'))
    return items


def _parse_bool(text: str) -> bool:
    return text in ('True', 'true', '1')


def save_model(model: DlfModel, path) -> Path:
    """保存 DLF 检查点（参数 + 配置清单）"""
    return gn.save_checkpoint(path, model.state_arrays(), config_items(model.cfg))


def load_model(path) -> DlfModel:
    """读取 DLF 检查点"""
    arrays, extra = gn.load_checkpoint(path)
    if extra.get('model') != 'dlf':
        raise ShapeError(f"{path} 不是 DLF 检查点 (model={extra.get('model')})")
    cfg = DlfConfig(
        n_labels=int(extra['dlf.n_labels']),
        base_features=int(extra['dlf.base_features']),
        wv_levels=int(extra['dlf.wv_levels']),
        ft_levels=int(extra['dlf.ft_levels']),
        mask_threshold=float(extra['dlf.mask_threshold']),
        ds_weights=[float(w) for w in extra['dlf.ds_weights'].split(',')],
        ablate_wv=_parse_bool(extra['dlf.ablate_wv']),
        ablate_ft=_parse_bool(extra['dlf.ablate_ft']),
        ablate_mask=_parse_bool(extra['dlf.ablate_mask']),
        wv_cfg=config_from_items(extra, 'wv.'),
        ft_cfg=config_from_items(extra, 'ft.'),
    )
    model = build_dlf(cfg, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    return model
