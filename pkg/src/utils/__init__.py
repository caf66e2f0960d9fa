#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
工具模块包
"""

from .logger import setup_logger
from .retry import retry_with_backoff
from .file_utils import (
    ensure_directory,
    parse_key_value_lines,
    read_key_value_file,
    write_key_value_file,
    write_run_manifest,
)
from .parallel import ordered_map, split_range

__all__ = [
    'setup_logger',
    'retry_with_backoff',
    'ensure_directory',
    'parse_key_value_lines',
    'read_key_value_file',
    'write_key_value_file',
    'write_run_manifest',
    'ordered_map',
    'split_range',
]
