#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
深度标签融合工具统一启动入口
"""

import sys
from pathlib import Path

# 添加项目路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root / 'src'))

from cli import run


def main():
    """主入口函数"""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
