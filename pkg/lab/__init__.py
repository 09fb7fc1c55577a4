"""分数生成模型与密度可控性的桌面级数值实验室"""

__version__ = "1.0.0"
