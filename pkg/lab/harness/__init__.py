"""
实验配置、报告模型与输出读写
"""
