#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
文件读写重试
网络盘或繁忙磁盘上的偶发 I/O 错误按指数退避重试；文件不存在等确定性错误直接抛出
"""

import time
import functools
from typing import Callable, Any, Optional, Tuple, Type

from loguru import logger

from config import config

# 重试也不会成功的错误
PERMANENT_ERRORS: Tuple[Type[BaseException], ...] = (
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    PermissionError,
)


def retry_with_backoff(
    max_retries: Optional[int] = None,
    delay: Optional[float] = None,
    backoff: float = 2.0,
    exceptions: tuple = (OSError,),
    permanent: tuple = PERMANENT_ERRORS,
):
    """
    带退避机制的重试装饰器

    Args:
        max_retries: 最大重试次数，缺省取 DLF_IO_RETRY_COUNT（调用时读取）
        delay: 初始延时（秒），缺省取 DLF_IO_RETRY_DELAY
        backoff: 退避倍数
        exceptions: 需要重试的异常类型
        permanent: 即使属于 exceptions 也不重试的异常类型
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            retries = config.IO_RETRY_COUNT if max_retries is None else max_retries
            current_delay = config.IO_RETRY_DELAY if delay is None else delay

            for attempt in range(retries + 1):
                try:
                    return func(*args, **kwargs)
                except permanent:
                    raise
                except exceptions as e:
                    if attempt == retries:
                        logger.error(f"{func.__name__} 重试 {retries} 次后仍失败: {e}")
                        raise
                    logger.warning(f"{func.__name__} 第{attempt + 1}次失败: {e}，{current_delay:.1f}s 后重试")
                    time.sleep(current_delay)
                    current_delay *= backoff

            return None
        return wrapper
    return decorator
