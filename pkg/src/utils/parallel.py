#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
并行工具
结果顺序与输入顺序一致，workers=1 时在当前线程串行执行
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar('T')
R = TypeVar('R')


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """
    按输入顺序返回 func(item) 的结果

    Args:
        func: 处理函数，不得修改共享状态
        items: 输入序列
        workers: 线程数

    Returns:
        结果列表
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def split_range(n: int, parts: int) -> List[range]:
    """把 [0, n) 切成至多 parts 个连续区间"""
    parts = max(1, min(parts, n)) if n > 0 else 1
    bounds = [n * i // parts for i in range(parts + 1)]
    return [range(bounds[i], bounds[i + 1]) for i in range(parts)]
