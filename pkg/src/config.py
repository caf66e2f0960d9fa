#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置管理模块
统一管理运行环境相关的配置项（超参数配置见各模块的配置模型及 cli.RunConfig）
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()


class Config:
    """项目配置类"""

    # 项目路径
    PROJECT_ROOT = Path(__file__).parent.parent
    LOGS_DIR = Path(os.getenv('DLF_LOGS_DIR', PROJECT_ROOT / "logs"))

    # 日志配置
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
    LOG_RETENTION_DAYS = int(os.getenv('LOG_RETENTION_DAYS', 30))
    LOG_TO_FILE = os.getenv('LOG_TO_FILE', '0').lower() in ('1', 'true', 'yes')

    # 计算配置
    DLF_WORKERS = int(os.getenv('DLF_WORKERS', 1))
    DLF_SEED = int(os.getenv('DLF_SEED', 0))

    # 文件读写重试
    IO_RETRY_COUNT = int(os.getenv('DLF_IO_RETRY_COUNT', 2))
    IO_RETRY_DELAY = float(os.getenv('DLF_IO_RETRY_DELAY', 0.5))

    @classmethod
    def ensure_directories(cls):
        """确保必要目录存在"""
        if cls.LOG_TO_FILE:
            cls.LOGS_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def validate_config(cls) -> bool:
        """验证配置完整性"""
        problems = []
        if cls.DLF_WORKERS < 1:
            problems.append(f"DLF_WORKERS={cls.DLF_WORKERS}")
        if cls.LOG_RETENTION_DAYS < 1:
            problems.append(f"LOG_RETENTION_DAYS={cls.LOG_RETENTION_DAYS}")
        if cls.LOG_LEVEL not in ('TRACE', 'DEBUG', 'INFO', 'SUCCESS', 'WARNING', 'ERROR', 'CRITICAL'):
            problems.append(f"LOG_LEVEL={cls.LOG_LEVEL}")

        if problems:
            raise ValueError(f"配置取值不合法: {', '.join(problems)}")

        return True


# 全局配置实例
config = Config()
