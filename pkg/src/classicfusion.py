#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
传统标签融合模块
多数投票（MV）、空间变化加权投票（SVWV）、联合标签融合（JLF），均配合邻域搜索
"""

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from errors import FusionError, ShapeError
from evalkit import gdsc
from utils import ordered_map, split_range
from volcore import AtlasBundle, LabelMap, Volume, znormalize

Radius = Tuple[int, int, int]


class FusionParams(BaseModel):
    """标签融合超参数"""

    model_config = ConfigDict(extra='forbid')

    beta: float = Field(0.05, gt=0)
    patch_radius: Radius = (1, 1, 0)
    search_radius: Radius = (4, 4, 1)
    ridge: float = Field(0.01, ge=0)
    normalize: bool = True

    @field_validator('patch_radius', 'search_radius')
    @classmethod
    def _non_negative(cls, v):
        if any(r < 0 for r in v):
            raise ValueError(f"半径必须 ≥ 0: {v}")
        return v

    @classmethod
    def svwv_preset(cls) -> "FusionParams":
        return cls(beta=0.05, patch_radius=(1, 1, 0), search_radius=(4, 4, 1))

    @classmethod
    def jlf_preset(cls) -> "FusionParams":
        return cls(beta=2.0, patch_radius=(1, 1, 0), search_radius=(3, 3, 1))


@dataclass
class SearchResult:
    """邻域搜索结果：每个体素的最佳位移与对应块 SSD"""

    displacement: np.ndarray  # (3, X, Y, Z) int
    ssd: np.ndarray           # (X, Y, Z) float64

    def candidate_labels(self, labels: LabelMap) -> LabelMap:
        """按最佳位移取出图谱候选标签"""
        idx = np.indices(labels.dims) + self.displacement
        return LabelMap(labels.data[idx[0], idx[1], idx[2]], labels.n_labels, labels.spacing)


@dataclass
class FusionResult:
    """融合结果"""

    labels: LabelMap
    weights: np.ndarray            # (N_atlas, X, Y, Z)
    candidates: List[LabelMap]
    fallback_voxels: int = 0


def majority_vote(candidates: Sequence[LabelMap]) -> LabelMap:
    """
    多数投票，平局取最小标签

    Raises:
        ShapeError: 候选为空或尺寸不一致
    """
    if not candidates:
        raise ShapeError("majority_vote 需要至少一个候选分割")
    dims = candidates[0].dims
    n_labels = max(c.n_labels for c in candidates)
    counts = np.zeros((n_labels,) + dims, dtype=np.int64)
    for cand in candidates:
        if cand.dims != dims:
            raise ShapeError(f"候选分割尺寸不一致: {cand.dims} vs {dims}")
        for label in range(n_labels):
            counts[label] += cand.data == label
    return LabelMap(np.argmax(counts, axis=0).astype(np.int32), n_labels, candidates[0].spacing)


def _ordered_displacements(radius: Radius) -> List[Radius]:
    """搜索窗内的位移，按 (L1 范数, 字典序) 排序"""
    ranges = [range(-r, r + 1) for r in radius]
    ds = list(itertools.product(*ranges))
    return sorted(ds, key=lambda d: (sum(abs(v) for v in d), d))


def _overlap_slices(dims: Sequence[int], d: Sequence[int]):
    """位移 d 下的有效区域：目标切片 m 与图谱切片 m+d（均在体内）"""
    tgt, src = [], []
    for n, dk in zip(dims, d):
        lo, hi = max(0, -dk), min(n, n - dk)
        if lo >= hi:
            return None
        tgt.append(slice(lo, hi))
        src.append(slice(lo + dk, hi + dk))
    return tuple(tgt), tuple(src)


def _box_sum(values: np.ndarray, radius: Radius) -> np.ndarray:
    """截断窗口内求和（窗外按 0 计）"""
    kernel = np.ones(tuple(2 * r + 1 for r in radius))
    return ndimage.correlate(values, kernel, mode='constant', cval=0.0)


def _prepare_images(target: Volume, atlas_images: Volume, p: FusionParams) -> Tuple[np.ndarray, np.ndarray]:
    if target.dims != atlas_images.dims or target.channels != atlas_images.channels:
        raise ShapeError(f"目标 {target.dims}x{target.channels} 与图谱 {atlas_images.dims}x{atlas_images.channels} 不一致")
    if p.normalize:
        target, atlas_images = znormalize(target), znormalize(atlas_images)
    return target.data.astype(np.float64), atlas_images.data.astype(np.float64)


def neighborhood_search(target: Volume, atlas: AtlasBundle, p: FusionParams) -> SearchResult:
    """
    逐体素在搜索窗内寻找使多通道块 SSD 最小的位移

    位移使 n+d 越界时不可取；块窗口在边界处截断；
    平局依次取 L1 范数较小、字典序较小的位移
    """
    t, a = _prepare_images(target, atlas.images, p)
    dims = target.dims
    best = np.full(dims, np.inf)
    best_d = np.zeros((3,) + dims, dtype=np.int32)
    for d in _ordered_displacements(p.search_radius):
        slices = _overlap_slices(dims, d)
        if slices is None:
            continue
        tgt, src = slices
        sq = np.zeros(dims)
        sq[tgt] = ((t[(slice(None),) + tgt] - a[(slice(None),) + src]) ** 2).sum(axis=0)
        ssd = _box_sum(sq, p.patch_radius)
        admissible = np.zeros(dims, dtype=bool)
        admissible[tgt] = True
        better = admissible & (ssd < best)
        best = np.where(better, ssd, best)
        for k in range(3):
            best_d[k][better] = d[k]
    return SearchResult(best_d, best)


def _search_all(target: Volume, atlases: Sequence[AtlasBundle], p: FusionParams,
                workers: int) -> List[SearchResult]:
    if not atlases:
        raise FusionError("至少需要一个图谱")
    return ordered_map(lambda atlas: neighborhood_search(target, atlas, p), atlases, workers)


def _weighted_vote(weights: np.ndarray, candidates: Sequence[LabelMap], spacing) -> LabelMap:
    n_labels = max(c.n_labels for c in candidates)
    votes = np.zeros((n_labels,) + candidates[0].dims)
    for w, cand in zip(weights, candidates):
        for label in range(n_labels):
            votes[label] += np.where(cand.data == label, w, 0.0)
    return LabelMap(np.argmax(votes, axis=0).astype(np.int32), n_labels, spacing)


def svwv(target: Volume, atlases: Sequence[AtlasBundle], p: FusionParams, workers: int = 1) -> FusionResult:
    """
    空间变化加权投票：w_i = exp(−β·SSD_i)，在图谱间归一化后按标签累加
    """
    searches = _search_all(target, atlases, p, workers)
    candidates = [s.candidate_labels(a.labels) for s, a in zip(searches, atlases)]
    ssd = np.stack([s.ssd for s in searches])
    # 减去最小 SSD 不改变归一化后的权重
    logits = -p.beta * (ssd - ssd.min(axis=0, keepdims=True))
    weights = np.exp(logits)
    weights /= weights.sum(axis=0, keepdims=True)
    labels = _weighted_vote(weights, candidates, target.spacing)
    logger.debug(f"SVWV 完成: {len(atlases)} 个图谱, β={p.beta}")
    return FusionResult(labels, weights, candidates)


def _patch_offsets(radius: Radius) -> np.ndarray:
    return np.array(list(itertools.product(*[range(-r, r + 1) for r in radius])), dtype=np.int64)


def _matched_abs_diffs(t: np.ndarray, a: np.ndarray, displacement: np.ndarray, voxels: np.ndarray,
                       offsets: np.ndarray) -> np.ndarray:
    """
    指定体素处目标块与匹配图谱块的逐元素绝对差 (V, P·C)；越界元素记 0
    """
    dims = np.array(t.shape[1:])
    d = displacement.reshape(3, -1)[:, voxels].T  # (V, 3)
    coords = np.stack(np.unravel_index(voxels, tuple(dims)), axis=1)  # (V, 3)
    feats = []
    for o in offsets:
        tc = coords + o
        ac = coords + d + o
        valid = np.all((tc >= 0) & (tc < dims) & (ac >= 0) & (ac < dims), axis=1)
        tc = np.clip(tc, 0, dims - 1)
        ac = np.clip(ac, 0, dims - 1)
        diff = np.abs(t[:, tc[:, 0], tc[:, 1], tc[:, 2]] - a[:, ac[:, 0], ac[:, 1], ac[:, 2]])
        feats.append(np.where(valid, diff, 0.0).T)
    return np.concatenate(feats, axis=1)


def jlf_weights(diffs: np.ndarray, beta: float, ridge: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    由匹配块绝对差计算 JLF 权重

    M_ij = (Σ |T−A_i|·|T−A_j|)^β，M ← M + ridge·mean(diag M)·I，w = M⁻¹1 / (1ᵀM⁻¹1)

    Args:
        diffs: (N_atlas, V, F)

    Returns:
        (weights (V, N_atlas), fallback 掩膜 (V,))；奇异体素退回均匀权重
    """
    n_atlas, n_vox, _ = diffs.shape
    m = np.einsum('ivf,jvf->vij', diffs, diffs) ** beta
    mean_diag = np.einsum('vii->v', m) / n_atlas
    m = m + (ridge * mean_diag)[:, None, None] * np.eye(n_atlas)
    ones = np.ones((n_vox, n_atlas, 1))
    fallback = mean_diag <= 0
    weights = np.full((n_vox, n_atlas), 1.0 / n_atlas)
    solvable = ~fallback
    if np.any(solvable):
        try:
            sol = np.linalg.solve(m[solvable], ones[solvable])[..., 0]
        except np.linalg.LinAlgError:
            sol = np.empty((int(solvable.sum()), n_atlas))
            for j, mat in enumerate(m[solvable]):
                try:
                    sol[j] = np.linalg.solve(mat, np.ones(n_atlas))
                except np.linalg.LinAlgError:
                    sol[j] = np.nan
        total = sol.sum(axis=1, keepdims=True)
        ok = np.all(np.isfinite(sol), axis=1) & (np.abs(total[:, 0]) > 0)
        solved = np.where(ok[:, None], sol / np.where(ok[:, None], total, 1.0), 1.0 / n_atlas)
        weights[solvable] = solved
        idx = np.flatnonzero(solvable)
        fallback[idx[~ok]] = True
    return weights, fallback


def jlf(target: Volume, atlases: Sequence[AtlasBundle], p: FusionParams, workers: int = 1,
        chunk_voxels: int = 16384) -> FusionResult:
    """
    联合标签融合：考虑图谱间误差相关性的加权投票

    体素分块计算，结果与分块方式和线程数无关
    """
    searches = _search_all(target, atlases, p, workers)
    candidates = [s.candidate_labels(a.labels) for s, a in zip(searches, atlases)]
    t = znormalize(target).data.astype(np.float64) if p.normalize else target.data.astype(np.float64)
    imgs = [(znormalize(a.images) if p.normalize else a.images).data.astype(np.float64) for a in atlases]
    offsets = _patch_offsets(p.patch_radius)
    n_vox = int(np.prod(target.dims))
    n_chunks = max(1, -(-n_vox // chunk_voxels))

    def run_chunk(rng_: range):
        voxels = np.arange(rng_.start, rng_.stop)
        diffs = np.stack([_matched_abs_diffs(t, a, s.displacement, voxels, offsets)
                          for a, s in zip(imgs, searches)])
        return jlf_weights(diffs, p.beta, p.ridge)

    parts = ordered_map(run_chunk, split_range(n_vox, n_chunks), workers)
    weights = np.concatenate([w for w, _ in parts], axis=0).T.reshape((len(atlases),) + target.dims)
    fallback = int(sum(int(f.sum()) for _, f in parts))
    if fallback:
        logger.warning(f"JLF: {fallback} 个体素的依赖矩阵奇异，已退回均匀权重")
    labels = _weighted_vote(weights, candidates, target.spacing)
    logger.debug(f"JLF 完成: {len(atlases)} 个图谱, β={p.beta}")
    return FusionResult(labels, weights, candidates, fallback)


FUSERS = {
    'svwv': svwv,
    'jlf': jlf,
}


def fuse(method: str, target: Volume, atlases: Sequence[AtlasBundle], p: Optional[FusionParams] = None,
         workers: int = 1) -> LabelMap:
    """
    按方法名融合；mv 直接使用未搜索的候选分割

    Args:
        method: mv | svwv | jlf
    """
    if method == 'mv':
        return majority_vote([a.labels for a in atlases])
    if method not in FUSERS:
        raise FusionError(f"未知融合方法: {method}")
    if p is None:
        p = FusionParams.svwv_preset() if method == 'svwv' else FusionParams.jlf_preset()
    return FUSERS[method](target, atlases, p, workers=workers).labels


def tune(method: str, cases: Sequence[Tuple[Volume, LabelMap, Sequence[AtlasBundle]]],
         betas: Sequence[float], search_radii: Sequence[Radius], label_set: Sequence[int],
         base: Optional[FusionParams] = None, workers: int = 1) -> Tuple[FusionParams, pd.DataFrame]:
    """
    网格搜索 β 与搜索半径，选出平均 GDSC 最高的参数

    Args:
        method: svwv | jlf
        cases: (目标图像, 参考分割, 图谱列表) 列表
        betas: β 候选
        search_radii: 搜索半径候选
        label_set: GDSC 标签子集

    Returns:
        (最佳参数, 网格得分表)
    """
    if method not in FUSERS:
        raise FusionError(f"只能对 svwv/jlf 调参: {method}")
    base = base or (FusionParams.svwv_preset() if method == 'svwv' else FusionParams.jlf_preset())
    rows = []
    for beta, radius in itertools.product(betas, search_radii):
        params = base.model_copy(update={'beta': float(beta), 'search_radius': tuple(radius)})
        scores = [gdsc(FUSERS[method](tgt, atl, params, workers=workers).labels, ref, label_set)
                  for tgt, ref, atl in cases]
        rows.append({'beta': float(beta), 'search_radius': tuple(radius), 'mean_gdsc': float(np.mean(scores))})
        logger.info(f"{method} 调参 β={beta} 搜索半径={tuple(radius)} → 平均 GDSC={rows[-1]['mean_gdsc']:.4f}")
    table = pd.DataFrame(rows)
    best = table.iloc[int(table['mean_gdsc'].to_numpy().argmax())]
    best_params = base.model_copy(update={'beta': float(best['beta']), 'search_radius': tuple(best['search_radius'])})
    return best_params, table
