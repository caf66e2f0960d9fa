#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
文件工具
目录创建、key=value 文本文件读写、运行清单
"""

import sys
import platform
from pathlib import Path
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Tuple

from errors import ConfigError
from .retry import retry_with_backoff


def ensure_directory(path) -> Path:
    """确保目录存在"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_key_value_lines(lines: Iterable[str], source: str = "<text>") -> List[Tuple[str, str]]:
    """
    解析 key=value 文本

    空行和 # 开头的注释行被忽略；重复键视为错误

    Args:
        lines: 文本行
        source: 来源名称（用于报错）

    Returns:
        按出现顺序排列的 (key, value) 列表
    """
    pairs = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno} 缺少 '=': {line}")
        key, value = line.split('=', 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno} 键为空")
        if key in seen:
            raise ConfigError(f"{source}:{lineno} 重复的键: {key}")
        seen.add(key)
        pairs.append((key, value))
    return pairs


@retry_with_backoff()
def read_key_value_file(path) -> Dict[str, str]:
    """读取 key=value 文件"""
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as f:
        return dict(parse_key_value_lines(f, source=str(path)))


@retry_with_backoff()
def write_key_value_file(path, items: Dict[str, object]) -> None:
    """写出 key=value 文件（保持字典顺序）"""
    path = Path(path)
    ensure_directory(path.parent)
    with open(path, 'w', encoding='utf-8') as f:
        for key, value in items.items():
            f.write(f"{key}={value}\n")


def software_versions() -> Dict[str, str]:
    """收集运行环境版本信息"""
    import numpy
    import scipy
    import pandas
    import pydantic

    return {
        'python': platform.python_version(),
        'numpy': numpy.__version__,
        'scipy': scipy.__version__,
        'pandas': pandas.__version__,
        'pydantic': pydantic.VERSION,
    }


def write_run_manifest(out_dir, command: str, settings: Dict[str, object], seed: int,
                       resolved: Optional[Dict[str, object]] = None) -> Path:
    """
    写出运行清单（配置、随机种子、版本），用于复现

    Args:
        out_dir: 输出目录
        command: 子命令名
        settings: 已解析的配置，写为 config.<键>
        seed: 随机种子
        resolved: 实际生效的参数（预设叠加覆盖项或调参结果），写为 resolved.<键>

    Returns:
        清单文件路径
    """
    items: Dict[str, object] = {
        'command': command,
        'argv': ' '.join(sys.argv[1:]),
        'started_at': datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
        'seed': seed,
    }
    for key, value in settings.items():
        items[f"config.{key}"] = value
    for key, value in (resolved or {}).items():
        items[f"resolved.{key}"] = value
    for key, value in software_versions().items():
        items[f"version.{key}"] = value

    path = Path(out_dir) / f"run_manifest_{command}.txt"
    write_key_value_file(path, items)
    return path
