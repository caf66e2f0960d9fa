#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
评估模块
DSC / GDSC、错误图、最大连通域后处理、配对 t 检验与评估报告
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy import ndimage, special

from errors import ShapeError
from volcore import LabelMap, Volume


def _check_same_dims(a: LabelMap, b: LabelMap) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"标签图尺寸不一致: {a.dims} vs {b.dims}")


def dsc(a: LabelMap, b: LabelMap, label: int) -> float:
    """
    单标签 Dice 系数 2|A∩B|/(|A|+|B|)；两者均为空时为 1
    """
    _check_same_dims(a, b)
    ma = a.data == label
    mb = b.data == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def gdsc(a: LabelMap, b: LabelMap, label_set: Sequence[int]) -> float:
    """
    标签集合上的广义 Dice（不加权的合并形式）
    2·Σ|A_l∩B_l| / Σ(|A_l|+|B_l|)；集合内标签全为空时记为 1
    """
    _check_same_dims(a, b)
    labels = list(label_set)
    if not labels:
        raise ShapeError("label_set 不能为空")
    inter = 0
    total = 0
    for label in labels:
        ma = a.data == label
        mb = b.data == label
        inter += int(np.logical_and(ma, mb).sum())
        total += int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def errormap(pred: LabelMap, ref: LabelMap) -> Volume:
    """二值错误图：标签不一致处为 1"""
    _check_same_dims(pred, ref)
    return Volume((pred.data != ref.data).astype(np.int32)[np.newaxis], pred.spacing)


def largest_cc_mask(lm: LabelMap) -> Volume:
    """
    前景（label ≠ 0）的最大 6 连通分量掩膜

    大小相同时取包含字典序最小体素的分量；无前景时返回全 0
    """
    foreground = lm.data != 0
    # 默认结构元即 6 连通；编号按光栅顺序分配，编号越小首体素字典序越小
    components, count = ndimage.label(foreground)
    if count == 0:
        return Volume(np.zeros((1,) + lm.dims, dtype=np.int32), lm.spacing)
    sizes = np.bincount(components.reshape(-1))[1:]
    keep = int(np.argmax(sizes)) + 1
    return Volume((components == keep).astype(np.int32)[np.newaxis], lm.spacing)


def apply_largest_cc(lm: LabelMap) -> LabelMap:
    """用最大连通域掩膜与分割相乘"""
    mask = largest_cc_mask(lm).data[0]
    return LabelMap(lm.data * mask, lm.n_labels, lm.spacing)


@dataclass
class TTestResult:
    """配对 t 检验结果"""

    t: float
    p: float
    n: int
    mean_diff: float
    degenerate: bool = False

    def __iter__(self):
        yield self.t
        yield self.p


def student_t_two_sided_p(t: float, df: int) -> float:
    """双侧 p 值：I_{df/(df+t²)}(df/2, 1/2)"""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """
    配对双侧 t 检验

    d = x − y；t = mean(d) / (sd(d)/√n)，sd 取 n−1 分母；
    sd=0 且 mean=0 时返回 (0, 1)；sd=0 且 mean≠0 时返回 (±inf, 0) 并标记 degenerate
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"配对样本长度不一致: {x.shape} vs {y.shape}")
    n = int(x.size)
    if n < 2:
        raise ShapeError(f"配对 t 检验需要 n ≥ 2，得到 {n}")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n, mean, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, n - 1), n, mean)


@dataclass
class MetricReport:
    """单个分割的评估报告"""

    dsc: Dict[int, float]
    gdsc: float
    gdsc_labels: List[int]
    volumes_mm3: Dict[int, float]
    ref_volumes_mm3: Dict[int, float] = field(default_factory=dict)

    def to_lines(self, percent: bool = True) -> List[str]:
        """扁平 key=value 行；percent 时额外输出 ×100 的显示值"""
        lines = [f"gdsc={self.gdsc:.6f}"]
        if percent:
            lines.append(f"gdsc_percent={100.0 * self.gdsc:.2f}")
        lines.append(f"gdsc_labels={','.join(str(l) for l in self.gdsc_labels)}")
        for label in sorted(self.dsc):
            lines.append(f"dsc.{label}={self.dsc[label]:.6f}")
            if percent:
                lines.append(f"dsc_percent.{label}={100.0 * self.dsc[label]:.2f}")
        for label in sorted(self.volumes_mm3):
            lines.append(f"volume_mm3.{label}={self.volumes_mm3[label]:.3f}")
        for label in sorted(self.ref_volumes_mm3):
            lines.append(f"ref_volume_mm3.{label}={self.ref_volumes_mm3[label]:.3f}")
        return lines

    def as_row(self) -> Dict[str, float]:
        row = {'gdsc': self.gdsc}
        row.update({f"dsc_{label}": value for label, value in self.dsc.items()})
        return row


def label_volumes(lm: LabelMap, labels: Sequence[int]) -> Dict[int, float]:
    """各标签体积（mm³，由 spacing 换算）"""
    voxel = float(np.prod(lm.spacing))
    counts = np.bincount(lm.data.reshape(-1), minlength=lm.n_labels)
    return {int(l): float(counts[l]) * voxel if l < counts.size else 0.0 for l in labels}


def evaluate(pred: LabelMap, ref: LabelMap, gdsc_labels: Optional[Sequence[int]] = None) -> MetricReport:
    """
    计算一对分割的评估报告

    Args:
        pred: 自动分割
        ref: 参考分割
        gdsc_labels: 参与 GDSC 的标签子集，缺省为全部前景标签
    """
    _check_same_dims(pred, ref)
    n_labels = max(pred.n_labels, ref.n_labels)
    foreground = list(range(1, n_labels))
    subset = list(gdsc_labels) if gdsc_labels else foreground
    return MetricReport(
        dsc={label: dsc(pred, ref, label) for label in foreground},
        gdsc=gdsc(pred, ref, subset),
        gdsc_labels=subset,
        volumes_mm3=label_volumes(pred, foreground),
        ref_volumes_mm3=label_volumes(ref, foreground),
    )


def reports_frame(reports: Dict[Tuple[str, str], MetricReport]) -> pd.DataFrame:
    """
    汇总多个 (方法, 受试者) 的报告为 DataFrame

    Args:
        reports: (method, subject) -> MetricReport
    """
    rows = []
    for (method, subject), report in reports.items():
        row = {'method': method, 'subject': subject}
        row.update(report.as_row())
        rows.append(row)
    return pd.DataFrame(rows)


def compare_methods(scores: pd.DataFrame, reference: str, metric: str = 'gdsc') -> pd.DataFrame:
    """
    参考方法与其余每个方法做配对 t 检验

    Args:
        scores: 含 method / subject / metric 列的长表
        reference: 参考方法名
        metric: 比较的指标列

    Returns:
        每行一个对比方法：mean_ref, mean_other, t, p, degenerate
    """
    wide = scores.pivot(index='subject', columns='method', values=metric).sort_index()
    if reference not in wide.columns:
        raise ShapeError(f"分数表中没有方法 {reference}")
    rows = []
    for method in wide.columns:
        if method == reference:
            continue
        paired = wide[[reference, method]].dropna()
        result = paired_ttest(paired[reference].to_numpy(), paired[method].to_numpy())
        rows.append({
            'method': method,
            'mean_ref': float(paired[reference].mean()),
            'mean_other': float(paired[method].mean()),
            't': result.t,
            'p': result.p,
            'degenerate': result.degenerate,
        })
        logger.debug(f"{reference} vs {method}: t={result.t:.4f} p={result.p:.4g}")
    return pd.DataFrame(rows)
