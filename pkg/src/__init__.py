# 深度标签融合工具包
