"""Exception and warning types raised across the package."""


class HQForestError(Exception):
    """Base class for all package errors."""


class EmptyClass(HQForestError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no samples")
        self.class_id = class_id


class InsufficientSamples(HQForestError):
    pass


class EmptySet(HQForestError):
    pass


class ZeroDiagonal(HQForestError):
    def __init__(self, index):
        super().__init__(f"covariance diagonal entry {index} is not positive")
        self.index = index


class SingularCovariance(HQForestError):
    pass


class DimensionMismatch(HQForestError):
    pass


class VolumeTooSmall(HQForestError):
    def __init__(self, layer, side, dims):
        super().__init__(f"layer {layer} needs side {side} but volume is {dims}")
        self.layer = layer


class NoCells(HQForestError):
    pass


class TooManyTrees(HQForestError):
    pass


class SingleClass(HQForestError):
    pass


class SchemaMismatch(HQForestError):
    pass


class NoForegroundClasses(HQForestError):
    pass


class BadConfig(HQForestError):
    pass


class FormatError(HQForestError):
    pass


class Misalignment(HQForestError):
    pass


class NotConvergedWarning(UserWarning):
    """Coordinate descent hit its iteration cap; the best iterate is returned."""


class DegenerateScoresWarning(UserWarning):
    """All projections were identical; thresholds fell back to zero."""


class DegenerateDataWarning(UserWarning):
    pass
