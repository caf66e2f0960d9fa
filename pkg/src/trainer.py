#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
训练与推理模块
数据集读写、留一法图像块采样、弹性形变增广、DLF / U-Net 训练循环、稠密网格推理
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

import dlf as dlf_mod
import gridnet as gn
import unet as unet_mod
from dlf import DlfConfig, DlfModel, build_dlf, deep_supervision_loss, dlf_forward, dlf_loss
from errors import DatasetError, ShapeError, TrainingDivergedError
from evalkit import apply_largest_cc
from gridnet import OptimConfig, Tensor
from unet import UNetConfig, UNetModel, build_unet, unet_forward
from utils import ensure_directory, ordered_map, read_key_value_file, retry_with_backoff
from volcore import (AtlasBundle, LabelMap, PatchSpec, Volume, argmax_labels, coordinate_maps,
                     dense_grid_centers, extract_label_patch, extract_patch, read_labelmap, read_volume,
                     stitch_patches, write_labelmap, write_volume, znormalize)

Triple = Tuple[int, int, int]
MANIFEST_NAME = "manifest.txt"


class ElasticParams(BaseModel):
    """弹性形变参数"""

    model_config = ConfigDict(extra='forbid')

    control_grid: int = Field(4, ge=2)
    max_displacement: float = Field(2.0, ge=0)
    sigma: float = Field(1.0, ge=0)


class TrainConfig(BaseModel):
    """训练配置（缺省为桌面规模的 DLF 设置）"""

    model_config = ConfigDict(extra='forbid')

    patch_size: Triple = (24, 24, 24)
    fg_patches: int = Field(10, ge=0)
    bg_patches: int = Field(2, ge=0)
    n_atlas_draw: int = Field(4, ge=1)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(1, ge=1)
    optim: OptimConfig = Field(default_factory=OptimConfig.dlf_preset)
    elastic: ElasticParams = Field(default_factory=ElasticParams)
    augment: bool = True
    flip_atlases: bool = False
    seed: int = 0

    @field_validator('patch_size')
    @classmethod
    def _positive(cls, v):
        if any(p < 1 for p in v):
            raise ValueError(f"patch_size 必须为正: {v}")
        return v

    @classmethod
    def dlf_preset(cls, **overrides) -> "TrainConfig":
        return cls(**{'fg_patches': 10, 'bg_patches': 2, 'epochs': 10, 'batch_size': 1,
                      'optim': OptimConfig.dlf_preset(), **overrides})

    @classmethod
    def unet_preset(cls, **overrides) -> "TrainConfig":
        return cls(**{'fg_patches': 20, 'bg_patches': 8, 'epochs': 20, 'batch_size': 7,
                      'optim': OptimConfig.unet_preset(), **overrides})


# ==================== 数据集 ====================

@dataclass
class Subject:
    """一个受试者：双模态图像 (2, X, Y, Z) 与人工分割"""

    subject_id: str
    images: Volume
    labels: LabelMap

    def as_atlas(self) -> AtlasBundle:
        return AtlasBundle(self.images, self.labels, self.subject_id)


@retry_with_backoff()
def write_manifest(root, subject_ids: Sequence[str]) -> None:
    Path(root, MANIFEST_NAME).write_text(''.join(f"{s}\n" for s in subject_ids), encoding='utf-8')


def write_subject(root, subject_id: str, t1: Volume, t2: Volume, labels: LabelMap) -> Path:
    """写出 subjects/<id>/{t1,t2,labels}.dlfv"""
    folder = ensure_directory(Path(root) / "subjects" / subject_id)
    write_volume(t1, folder / "t1.dlfv")
    write_volume(t2, folder / "t2.dlfv")
    write_labelmap(labels, folder / "labels.dlfv")
    return folder


def load_subject(root, subject_id: str, n_labels: Optional[int] = None) -> Subject:
    folder = Path(root) / "subjects" / subject_id
    if not folder.is_dir():
        raise DatasetError(f"受试者目录不存在: {folder}")
    t1 = read_volume(folder / "t1.dlfv")
    t2 = read_volume(folder / "t2.dlfv")
    labels = read_labelmap(folder / "labels.dlfv", n_labels)
    if t1.channels != 1 or t2.channels != 1:
        raise DatasetError(f"{subject_id}: t1/t2 必须为单通道")
    if t1.dims != t2.dims or t1.dims != labels.dims:
        raise DatasetError(f"{subject_id}: t1 {t1.dims} / t2 {t2.dims} / labels {labels.dims} 尺寸不一致")
    images = Volume(np.concatenate([t1.data, t2.data], axis=0), t1.spacing)
    return Subject(subject_id, images, labels)


def load_dataset(root, n_labels: Optional[int] = None) -> List[Subject]:
    """
    按 manifest.txt 顺序读取全部受试者

    标签数 L 缺省取所有受试者的最大标签 + 1
    """
    manifest = Path(root) / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"数据集缺少 {manifest}")
    ids = [line.strip() for line in manifest.read_text(encoding='utf-8').splitlines() if line.strip()]
    if not ids:
        raise DatasetError(f"{manifest} 为空")
    subjects = [load_subject(root, sid, n_labels) for sid in ids]
    if n_labels is None:
        n_labels = max(s.labels.n_labels for s in subjects)
        subjects = [replace(s, labels=LabelMap(s.labels.data, n_labels, s.labels.spacing)) for s in subjects]
    logger.info(f"读取数据集 {root}: {len(subjects)} 个受试者, L={n_labels}")
    return subjects


def split_subjects(subjects: Sequence[Subject], holdout: int) -> Tuple[List[Subject], List[Subject]]:
    """最后 holdout 个受试者作为测试目标，其余作为训练集/图谱库"""
    if holdout < 0 or holdout >= len(subjects):
        raise DatasetError(f"holdout={holdout} 与受试者数 {len(subjects)} 不相容")
    cut = len(subjects) - holdout
    return list(subjects[:cut]), list(subjects[cut:])


def atlas_library(subjects: Sequence[Subject], exclude: Optional[str] = None, flip: bool = False) -> List[AtlasBundle]:
    """
    图谱库：除目标外的全部受试者；flip 时额外加入沿 x 翻转的副本
    """
    atlases = []
    for s in subjects:
        if s.subject_id == exclude:
            continue
        atlases.append(s.as_atlas())
        if flip:
            atlases.append(AtlasBundle(Volume(s.images.data[:, ::-1].copy(), s.images.spacing),
                                       LabelMap(s.labels.data[::-1].copy(), s.labels.n_labels, s.labels.spacing),
                                       f"{s.subject_id}_flip"))
    return atlases


# ==================== 图像块采样 ====================

@dataclass
class TrainingSample:
    """同一中心处的目标块、坐标块、图谱块与真值块"""

    subject_id: str
    center: Triple
    target: Volume
    coords: Volume
    gt: LabelMap
    atlases: List[AtlasBundle] = field(default_factory=list)
    augmented: bool = False


def resample_atlases(atlases: Sequence[AtlasBundle], n_draw: int, rng: np.random.Generator) -> List[AtlasBundle]:
    """有放回地均匀抽取 n_draw 个图谱（允许重复）"""
    if not atlases:
        raise ShapeError("resample_atlases 需要至少一个图谱")
    picks = rng.integers(0, len(atlases), size=n_draw)
    return [atlases[i] for i in picks]


def _valid_voxels(mask: np.ndarray, patch_size: Sequence[int]) -> np.ndarray:
    """mask 中可作为块中心（块完全落在体内）的体素坐标 (K, 3)"""
    window = np.zeros_like(mask, dtype=bool)
    slices = tuple(slice(p // 2, n - p + p // 2 + 1) for p, n in zip(patch_size, mask.shape))
    window[slices] = True
    return np.argwhere(mask & window)


def _draw_centers(labels: LabelMap, cfg: TrainConfig, rng: np.random.Generator) -> List[Triple]:
    for p, n in zip(cfg.patch_size, labels.dims):
        if p > n:
            raise ShapeError(f"块大小 {cfg.patch_size} 超过体数据尺寸 {labels.dims}")
    foreground = labels.data != 0
    centers = []
    for mask, count, kind in ((foreground, cfg.fg_patches, "前景"), (~foreground, cfg.bg_patches, "背景")):
        if count == 0:
            continue
        voxels = _valid_voxels(mask, cfg.patch_size)
        if len(voxels) == 0:
            raise DatasetError(f"可采样区域内没有{kind}体素")
        picks = rng.integers(0, len(voxels), size=count)
        centers.extend(tuple(int(c) for c in voxels[i]) for i in picks)
    return centers


def _patch_images(v: Volume, spec: PatchSpec) -> Volume:
    return znormalize(extract_patch(v, spec))


def _atlas_patch(atlas: AtlasBundle, spec: PatchSpec) -> AtlasBundle:
    return AtlasBundle(_patch_images(atlas.images, spec), extract_label_patch(atlas.labels, spec), atlas.name)


def sample_training_patches(subjects: Sequence[Subject], cfg: TrainConfig, with_atlases: bool = True,
                            workers: int = 1) -> List[TrainingSample]:
    """
    留一法构建训练块集合

    每个受试者轮流作为目标，其余受试者为图谱库；每个目标抽取 fg_patches 个前景中心
    和 bg_patches 个背景中心，每个块独立有放回地抽取 n_atlas_draw 个图谱。
    随机流按 (seed, 目标序号, 块序号) 派生，线程数不影响结果

    Args:
        subjects: 训练受试者（≥ 2）
        cfg: 训练配置
        with_atlases: False 时只采目标/坐标/真值（U-Net 基线）
        workers: 并行线程数

    Returns:
        样本列表；cfg.augment 时追加每个样本的一个形变副本
    """
    if len(subjects) < 2:
        raise DatasetError(f"留一法至少需要 2 个受试者，得到 {len(subjects)}")

    jobs = []
    for ti, target in enumerate(subjects):
        centers = _draw_centers(target.labels, cfg, np.random.default_rng([cfg.seed, ti]))
        for idx, center in enumerate(centers):
            jobs.append((ti, idx, center))
    coords_cache = {s.subject_id: coordinate_maps(s.labels.dims, s.labels.spacing) for s in subjects}
    libraries = {s.subject_id: atlas_library(subjects, s.subject_id, cfg.flip_atlases) for s in subjects} \
        if with_atlases else {}

    def build(job) -> TrainingSample:
        ti, idx, center = job
        target = subjects[ti]
        spec = PatchSpec(center, tuple(cfg.patch_size))
        atlases = []
        if with_atlases:
            drawn = resample_atlases(libraries[target.subject_id], cfg.n_atlas_draw,
                                     np.random.default_rng([cfg.seed, ti, idx, 0]))
            atlases = [_atlas_patch(a, spec) for a in drawn]
        return TrainingSample(target.subject_id, center, _patch_images(target.images, spec),
                              extract_patch(coords_cache[target.subject_id], spec),
                              extract_label_patch(target.labels, spec), atlases)

    samples = ordered_map(build, jobs, workers)
    if cfg.augment:
        def deform(job_sample):
            (ti, idx, _), sample = job_sample
            return elastic_augment(sample, cfg.elastic, np.random.default_rng([cfg.seed, ti, idx, 1]))
        samples = samples + ordered_map(deform, list(zip(jobs, samples)), workers)
    logger.info(f"采样完成: {len(subjects)} 个目标, {len(samples)} 个样本"
                f"{' (含形变副本)' if cfg.augment else ''}")
    return samples


# ==================== 弹性形变 ====================

def random_displacement(dims: Sequence[int], params: ElasticParams, rng: np.random.Generator) -> np.ndarray:
    """
    平滑随机位移场 (3, X, Y, Z)：控制网格上的均匀随机位移 → 三次样条放大 → 高斯平滑 →
    缩放到最大模长恰为 max_displacement
    """
    dims = tuple(int(n) for n in dims)
    g = params.control_grid
    components = []
    for _ in range(3):
        coarse = rng.uniform(-1.0, 1.0, size=(g, g, g))
        zoomed = ndimage.zoom(coarse, [n / g for n in dims], order=3, mode='nearest', grid_mode=True)
        if params.sigma > 0:
            zoomed = ndimage.gaussian_filter(zoomed, params.sigma, mode='nearest')
        components.append(zoomed[:dims[0], :dims[1], :dims[2]])
    disp = np.stack(components)
    peak = float(np.sqrt((disp ** 2).sum(axis=0)).max())
    if peak > 0:
        disp *= params.max_displacement / peak
    return disp


def warp_volume(v: Volume, disp: np.ndarray, order: int) -> np.ndarray:
    """按位移场重采样每个通道（order=1 三线性，order=0 最近邻）"""
    grid = np.indices(v.dims, dtype=np.float64) + disp
    return np.stack([ndimage.map_coordinates(ch, grid, order=order, mode='nearest') for ch in v.data])


def _warp_labels(lm: LabelMap, disp: np.ndarray) -> LabelMap:
    return LabelMap(warp_volume(lm.to_volume(), disp, 0)[0], lm.n_labels, lm.spacing)


def elastic_augment(sample: TrainingSample, params: ElasticParams, rng: np.random.Generator) -> TrainingSample:
    """
    对一个样本施加同一个随机弹性形变：图像三线性插值，标签与候选分割最近邻插值；
    坐标块保持不变
    """
    if params.max_displacement == 0:
        return replace(sample, augmented=True)
    disp = random_displacement(sample.gt.dims, params, rng)
    target = Volume(warp_volume(sample.target, disp, 1), sample.target.spacing)
    atlases = [AtlasBundle(Volume(warp_volume(a.images, disp, 1), a.images.spacing), _warp_labels(a.labels, disp),
                           a.name)
               for a in sample.atlases]
    return replace(sample, target=target, gt=_warp_labels(sample.gt, disp), atlases=atlases, augmented=True)


# ==================== 训练循环 ====================

@dataclass
class TrainResult:
    """训练结果：模型与逐轮平均损失"""

    model: Union[DlfModel, UNetModel]
    loss_trace: List[float]
    cfg: TrainConfig


def _unet_input(target: Volume, coords: Volume) -> Tensor:
    return gn.concat([Tensor(target.data), Tensor(coords.data)], axis=0)


def unet_loss(model: UNetModel, sample: TrainingSample) -> Tensor:
    out = unet_forward(model, _unet_input(sample.target, sample.coords), training=True)
    weights = model.cfg.ds_weights[:model.cfg.n_heads] if model.cfg.deep_supervision else [1.0]
    return deep_supervision_loss(out.logits, out.aux, sample.gt.data, weights, model.cfg.out_channels)


def _dlf_sample_loss(model: DlfModel, sample: TrainingSample) -> Tensor:
    output = dlf_forward(model, sample.target, sample.coords, sample.atlases, training=True)
    return dlf_loss(model, output, sample.gt.data)


def _fit(model, loss_fn, samples: Sequence[TrainingSample], cfg: TrainConfig) -> List[float]:
    """
    Adam + 阶梯学习率；batch_size > 1 时按样本顺序累加梯度（每个样本损失除以批大小）

    Raises:
        TrainingDivergedError: 损失出现 NaN/Inf
    """
    params: Dict[str, Tensor] = model.parameters()
    state = gn.AdamState()
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        lr = gn.lr_schedule(cfg.optim, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            for i in batch:
                loss = loss_fn(model, samples[i])
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"第 {epoch} 轮样本 {int(i)} 损失为 {value}",
                        {'epoch': epoch, 'sample': int(i), 'subject': samples[i].subject_id,
                         'center': samples[i].center, 'lr': lr, 'step': state.t})
                total += value
                gn.backward(gn.scale(loss, 1.0 / len(batch)))
            gn.adam_step(params, {name: p.grad for name, p in params.items()}, state, lr, cfg.optim)
        mean = total / len(samples)
        trace.append(mean)
        logger.info(f"epoch {epoch}/{cfg.epochs} lr={lr:.3g} loss={mean:.6f}")
    model.zero_grad()
    return trace


def train_dlf(samples: Sequence[TrainingSample], model_cfg: DlfConfig, cfg: TrainConfig) -> TrainResult:
    """
    训练 DLF 模型（两个子网端到端联合优化）

    Args:
        samples: sample_training_patches 生成的样本
        model_cfg: DLF 模型配置
        cfg: 训练配置；epochs=0 时返回初始化模型
    """
    if not samples:
        raise DatasetError("训练样本为空")
    if any(not s.atlases for s in samples):
        raise DatasetError("DLF 训练样本必须带图谱块")
    model = build_dlf(model_cfg, np.random.default_rng(cfg.seed))
    logger.info(f"训练 DLF: {len(samples)} 个样本, {cfg.epochs} 轮, 批大小 {cfg.batch_size}")
    trace = _fit(model, _dlf_sample_loss, samples, cfg)
    return TrainResult(model, trace, cfg)


def baseline_unet_config(n_labels: int, levels: int = 3, base_features: int = 8) -> UNetConfig:
    """直接 U-Net 基线：输入目标 T1/T2 + 坐标，带深监督"""
    return UNetConfig(in_channels=5, out_channels=n_labels, levels=levels, base_features=base_features,
                      deep_supervision=True)


def train_unet(samples: Sequence[TrainingSample], model_cfg: UNetConfig, cfg: TrainConfig) -> TrainResult:
    """训练直接 U-Net 基线（只用目标图像块，不用图谱）"""
    if not samples:
        raise DatasetError("训练样本为空")
    model = build_unet(model_cfg, np.random.default_rng(cfg.seed))
    logger.info(f"训练 U-Net: {len(samples)} 个样本, {cfg.epochs} 轮, 批大小 {cfg.batch_size}")
    trace = _fit(model, unet_loss, samples, cfg)
    return TrainResult(model, trace, cfg)


@retry_with_backoff()
def write_loss_trace(path, trace: Sequence[float]) -> None:
    Path(path).write_text(''.join(f"{i}\t{v!r}\n" for i, v in enumerate(trace, start=1)), encoding='utf-8')


def read_loss_trace(path) -> List[float]:
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    return [float(line.split('\t')[1]) for line in lines if line.strip()]


def save_training(result: TrainResult, out_dir) -> Path:
    """保存检查点与 loss_trace.txt"""
    if isinstance(result.model, DlfModel):
        path = dlf_mod.save_model(result.model, out_dir)
    else:
        path = unet_mod.save_model(result.model, out_dir)
    write_loss_trace(path / "loss_trace.txt", result.loss_trace)
    return path


def load_any_model(path) -> Union[DlfModel, UNetModel]:
    """按检查点 config.txt 中的 model 字段选择读取方式"""
    manifest = Path(path) / "config.txt"
    kind = read_key_value_file(manifest).get('model') if manifest.exists() else None
    if kind == 'dlf':
        return dlf_mod.load_model(path)
    if kind == 'unet':
        return unet_mod.load_model(path)
    raise DatasetError(f"{path}: 无法识别的检查点类型 {kind}")


# ==================== 推理 ====================

def _model_divisor(model) -> int:
    if isinstance(model, DlfModel):
        return model.cfg.divisor
    return 2 ** model.cfg.levels


def infer(model: Union[DlfModel, UNetModel], target: Volume, atlases: Optional[Sequence[AtlasBundle]],
          patch_size: Sequence[int], stride: Sequence[int], lcc: bool = False, workers: int = 1) -> LabelMap:
    """
    稠密网格推理：逐块前向 → 重叠处 logits 取平均 → argmax

    Args:
        model: DLF 或 U-Net 模型
        target: 目标图像 (2, X, Y, Z)
        atlases: 已配准的图谱（DLF 必需，数量可与训练时不同）
        patch_size: 块大小
        stride: 网格步长
        lcc: 是否做最大连通域后处理
        workers: 并行处理块的线程数

    Raises:
        DatasetError: DLF 模型缺少图谱
    """
    is_dlf = isinstance(model, DlfModel)
    if is_dlf and not atlases:
        raise DatasetError("DLF 推理需要至少一个图谱")
    if not is_dlf and atlases:
        logger.warning("U-Net 基线推理忽略传入的图谱")
    patch_size = tuple(int(p) for p in patch_size)
    divisor = _model_divisor(model)
    if any(p % divisor for p in patch_size):
        raise ShapeError(f"块大小 {patch_size} 不能被 {divisor} 整除")
    n_labels = model.cfg.n_labels if is_dlf else model.cfg.out_channels

    dims = target.dims
    coords = coordinate_maps(dims, target.spacing)
    centers = dense_grid_centers(dims, patch_size, stride)

    def run_patch(center) -> np.ndarray:
        spec = PatchSpec(center, patch_size)
        t_patch = _patch_images(target, spec)
        c_patch = extract_patch(coords, spec)
        if is_dlf:
            patches = [_atlas_patch(a, spec) for a in atlases]
            return dlf_forward(model, t_patch, c_patch, patches, training=False).logits.data
        return unet_forward(model, _unet_input(t_patch, c_patch), training=False).logits.data

    logger.info(f"推理: {len(centers)} 个块, 块大小 {patch_size}"
                f"{f', {len(atlases)} 个图谱' if is_dlf else ''}")
    logits = ordered_map(run_patch, centers, workers)
    stitched = stitch_patches(logits, centers, dims, n_labels, target.spacing)
    result = argmax_labels(stitched.data, n_labels, target.spacing)
    if lcc:
        result = apply_largest_cc(result)
    return result


def infer_leave_one_out(model: Union[DlfModel, UNetModel], subjects: Sequence[Subject], target_id: str,
                        patch_size: Sequence[int], stride: Sequence[int], lcc: bool = False,
                        flip: bool = False, workers: int = 1) -> LabelMap:
    """以 target_id 为目标、其余受试者为图谱推理"""
    target = next((s for s in subjects if s.subject_id == target_id), None)
    if target is None:
        raise DatasetError(f"数据集中没有受试者 {target_id}")
    atlases = atlas_library(subjects, target_id, flip) if isinstance(model, DlfModel) else None
    return infer(model, target.images, atlases, patch_size, stride, lcc, workers)
