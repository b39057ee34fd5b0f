class MTALError(Exception):
    """工具包所有异常的基类"""


class ConfigError(MTALError, ValueError):
    """超参数或配置非法"""


class ShapeError(MTALError, ValueError):
    """张量维度不匹配"""


class NumericError(MTALError, ArithmeticError):
    """出现非有限数值或矩阵奇异"""


class DatasetValidationError(MTALError, ValueError):
    """数据集不满足不变量，消息中包含字段名"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(MTALError, ValueError):
    """数据本身无法支持请求的操作（空组、正值性失败等）"""


class ArgumentError(MTALError, ValueError):
    """调用参数不满足前置条件"""


class SimulationError(MTALError, ValueError):
    """合成数据模拟失败"""


class DataIOError(MTALError, OSError):
    """文件读写或格式错误"""


class ArchiveIntegrityError(DataIOError):
    """模型存档校验失败"""


class ArchiveVersionError(DataIOError):
    """模型存档版本不兼容"""


class TrainingAbortedError(MTALError):
    """训练因数值问题中止"""

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"第 {epoch} 轮训练中止: {message}")
