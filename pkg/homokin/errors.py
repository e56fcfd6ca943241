class HomokinError(Exception):
    pass


class SingularDeformation(HomokinError):
    """det(I+tA) 到达零点（t* 之后流场无定义）"""


class ParticleOverlap(HomokinError):
    pass


class UnsupportedMeasure(HomokinError):
    pass


class MajorantOverflow(HomokinError):
    pass


class InsufficientGrowth(HomokinError):
    pass


class NotNearEquilibrium(HomokinError):
    pass


class InsufficientSignal(HomokinError):
    pass


class GridMismatch(HomokinError):
    pass


class ConfigError(HomokinError):
    pass
