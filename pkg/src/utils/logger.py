#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
日志配置工具
"""

import sys
from typing import Optional
from loguru import logger
from config import config


def setup_logger(name: str = "default", level: Optional[str] = None):
    """
    设置日志配置

    标准输出保留给报告内容，控制台日志写到标准错误

    Args:
        name: 日志名称，同时决定日志文件名前缀（仅在 LOG_TO_FILE 开启时写文件）
        level: 覆盖配置中的日志级别
    """
    level = (level or config.LOG_LEVEL).upper()

    # 清除默认配置
    logger.remove()

    # 控制台输出
    logger.add(
        sys.stderr,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{extra[name]}</cyan> | {message}",
        level=level,
        filter=lambda record: record["extra"].setdefault("name", name) is not None
    )

    # 文件输出
    if config.LOG_TO_FILE:
        logger.add(
            str(config.LOGS_DIR / f"{name}_{'{time:YYYY-MM-DD}'}.log"),
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {extra[name]} | {message}",
            level=level,
            rotation="1 day",
            retention=f"{config.LOG_RETENTION_DAYS} days",
            filter=lambda record: record["extra"].setdefault("name", name) is not None
        )

    return logger.bind(name=name)
