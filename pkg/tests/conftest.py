#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试公共配置：把 src 加入导入路径，提供小型体模与 float64 精度上下文
"""

import os
import sys
from pathlib import Path

# 测试中读写失败不等待重试
os.environ.setdefault('DLF_IO_RETRY_DELAY', '0')
os.environ.setdefault('LOG_TO_FILE', '0')

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / 'src'))

import numpy as np
import pytest

import gridnet as gn
from synthlab import PhantomConfig, make_dataset
from volcore import AtlasBundle, LabelMap, Volume


@pytest.fixture
def f64():
    """梯度校验使用 float64"""
    with gn.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_phantom():
    return PhantomConfig(dims=(16, 16, 16), n_labels=3, n_subjects=3, misalign_sigma=1.0,
                         noise_sigma=2.0, seed=7)


@pytest.fixture
def dataset_dir(tmp_path, tiny_phantom):
    return make_dataset(tiny_phantom, tmp_path / "data")


def random_atlases(rng, dims, n_atlases, n_labels):
    """随机目标与图谱（图像 2 通道，标签均匀随机）"""
    target = Volume(rng.normal(size=(2,) + tuple(dims)).astype(np.float32))
    atlases = [AtlasBundle(Volume(rng.normal(size=(2,) + tuple(dims)).astype(np.float32)),
                           LabelMap(rng.integers(0, n_labels, size=dims), n_labels),
                           f"a{i}")
               for i in range(n_atlases)]
    return target, atlases


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 合成基准规模的慢速测试（pytest -m 'not slow' 可跳过）")
