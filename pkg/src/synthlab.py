#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成体模模块
由同一模板经有界平滑形变得到各受试者，模拟配准后仍残留误差的图谱；
两种模态按标签取不同的对比度
"""

from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import PhantomError
from trainer import ElasticParams, random_displacement, warp_volume, write_manifest, write_subject
from utils import ensure_directory, ordered_map, write_key_value_file
from volcore import LabelMap, Volume

MIN_DIM = 8
MIN_LABEL_FRACTION = 0.01


class PhantomConfig(BaseModel):
    """体模配置"""

    model_config = ConfigDict(extra='forbid')

    dims: Tuple[int, int, int] = (32, 32, 32)
    n_labels: int = Field(5, ge=2)
    n_subjects: int = Field(6, ge=2)
    misalign_sigma: float = Field(2.0, ge=0)
    deform_smoothing: float = Field(2.0, ge=0)
    control_grid: int = Field(4, ge=2)
    t1_means: Optional[List[float]] = None
    t2_means: Optional[List[float]] = None
    label_std: float = Field(3.0, ge=0)
    noise_sigma: float = Field(5.0, ge=0)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    @model_validator(mode='after')
    def _fill_means(self):
        n = self.n_labels
        if self.t1_means is None:
            self.t1_means = [float(v) for v in np.linspace(20.0, 120.0, n)]
        if self.t2_means is None:
            # T2 对比度与 T1 相反，且前景标签顺序错开
            self.t2_means = [120.0] + [float(v) for v in np.roll(np.linspace(20.0, 100.0, n - 1), 1)]
        if len(self.t1_means) != n or len(self.t2_means) != n:
            raise ValueError(f"t1_means/t2_means 长度必须等于 n_labels={n}")
        return self

    def elastic(self) -> ElasticParams:
        return ElasticParams(control_grid=self.control_grid, max_displacement=self.misalign_sigma,
                             sigma=self.deform_smoothing)


def make_template(cfg: PhantomConfig, rng: np.random.Generator) -> LabelMap:
    """
    模板分割：嵌套椭球，内核为标签 1，外壳按方位角等分为标签 2..L−1；
    L=2 时为单个椭球。方位角起点由 rng 决定

    Raises:
        PhantomError: 尺寸过小，某个标签不足前景的 1%
    """
    dims = np.asarray(cfg.dims)
    if dims.min() < MIN_DIM:
        raise PhantomError(f"体模尺寸 {tuple(cfg.dims)} 过小（每轴至少 {MIN_DIM}）")
    phase = rng.uniform(0.0, 2.0 * np.pi)

    grid = np.indices(cfg.dims, dtype=np.float64)
    center = (dims - 1) / 2.0
    outer = dims * np.array([0.40, 0.36, 0.32])
    rel = (grid - center.reshape(3, 1, 1, 1)) / outer.reshape(3, 1, 1, 1)
    r = np.sqrt((rel ** 2).sum(axis=0))

    labels = np.zeros(cfg.dims, dtype=np.int32)
    inside = r <= 1.0
    if cfg.n_labels == 2:
        labels[inside] = 1
    else:
        core = r <= 0.5
        sectors = cfg.n_labels - 2
        angle = np.mod(np.arctan2(rel[1], rel[0]) + phase, 2.0 * np.pi)
        sector = np.minimum((angle / (2.0 * np.pi) * sectors).astype(np.int32), sectors - 1)
        shell = inside & ~core
        labels[shell] = 2 + sector[shell]
        labels[core] = 1

    counts = np.bincount(labels.reshape(-1), minlength=cfg.n_labels)
    foreground = counts[1:].sum()
    if foreground == 0 or counts[1:].min() < MIN_LABEL_FRACTION * foreground:
        raise PhantomError(f"体模尺寸 {tuple(cfg.dims)} 容纳不下 {cfg.n_labels} 个标签（各标签体素数 {counts.tolist()}）")
    return LabelMap(labels, cfg.n_labels, cfg.spacing)


def _synthesize(labels: np.ndarray, means: List[float], cfg: PhantomConfig, rng: np.random.Generator) -> Volume:
    """每个标签一个受试者级均值（围绕配置均值抖动 label_std）+ 逐体素噪声"""
    level = np.asarray(means, dtype=np.float64) + cfg.label_std * rng.standard_normal(len(means))
    image = level[labels]
    if cfg.noise_sigma > 0:
        image = image + cfg.noise_sigma * rng.standard_normal(labels.shape)
    return Volume(image.astype(np.float32)[np.newaxis], cfg.spacing)


def make_subject(template: LabelMap, cfg: PhantomConfig, rng: np.random.Generator) -> Tuple[Volume, Volume, LabelMap]:
    """
    对模板施加平滑随机形变（最大位移 misalign_sigma 体素）并合成两种模态

    Returns:
        (t1, t2, labels)
    """
    if cfg.misalign_sigma > 0:
        disp = random_displacement(template.dims, cfg.elastic(), rng)
        data = warp_volume(template.to_volume(), disp, order=0)[0]
    else:
        data = template.data.copy()
    labels = LabelMap(data, template.n_labels, template.spacing)
    missing = sorted(set(range(template.n_labels)) - set(np.unique(data).tolist()))
    if missing:
        logger.warning(f"形变后缺少标签 {missing}")
    t1 = _synthesize(labels.data, cfg.t1_means, cfg, rng)
    t2 = _synthesize(labels.data, cfg.t2_means, cfg, rng)
    return t1, t2, labels


def subject_ids(n: int) -> List[str]:
    return [f"sub-{i + 1:03d}" for i in range(n)]


def phantom_items(cfg: PhantomConfig) -> Dict[str, object]:
    items = {}
    for key, value in cfg.model_dump().items():
        if isinstance(value, (list, tuple)):
            value = ','.join(str(v) for v in value)
        items[f"phantom.{key}"] = value
    return items


def make_dataset(cfg: PhantomConfig, out_dir, workers: int = 1) -> Path:
    """
    生成数据集目录：subjects/<id>/{t1,t2,labels}.dlfv + manifest.txt + phantom.txt

    模板与每个受试者使用由 (seed, 序号) 派生的独立随机流，线程数不影响结果
    """
    root = ensure_directory(out_dir)
    template = make_template(cfg, np.random.default_rng([cfg.seed, 0]))
    ids = subject_ids(cfg.n_subjects)

    def build(index: int) -> str:
        t1, t2, labels = make_subject(template, cfg, np.random.default_rng([cfg.seed, 1, index]))
        write_subject(root, ids[index], t1, t2, labels)
        logger.debug(f"已生成 {ids[index]}")
        return ids[index]

    written = ordered_map(build, range(cfg.n_subjects), workers)
    write_manifest(root, written)
    write_key_value_file(root / "phantom.txt", phantom_items(cfg))
    logger.info(f"合成数据集: {root} ({len(written)} 个受试者, L={cfg.n_labels}, "
                f"misalign_sigma={cfg.misalign_sigma})")
    return root
