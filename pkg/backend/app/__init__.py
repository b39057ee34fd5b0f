"""MTAL 反事实结果估计工具包"""

__version__ = "0.1.0"
