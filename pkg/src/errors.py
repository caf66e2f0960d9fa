#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
异常定义模块
库函数抛出异常，由命令行入口统一捕获并转换为退出码
"""


class DlfError(Exception):
    """工具包基础异常"""


class ConfigError(DlfError, ValueError):
    """配置错误（未知键、取值越界等）"""


class VolumeFormatError(DlfError):
    """DLFV 文件格式错误"""


class ShapeError(DlfError, ValueError):
    """数组形状或维度不匹配"""


class AutogradError(DlfError):
    """自动微分图使用错误"""


class FusionError(DlfError):
    """标签融合失败"""


class TrainingDivergedError(DlfError):
    """训练损失出现 NaN/Inf"""

    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PhantomError(DlfError):
    """合成体模参数不合法"""


class DatasetError(DlfError):
    """数据集目录结构或内容错误"""
