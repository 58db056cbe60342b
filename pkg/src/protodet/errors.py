"""Exception types shared across the package."""


class ProtodetError(Exception):
    """Base class for all package errors."""


class ZeroVectorError(ProtodetError, ValueError):
    pass


class NonFiniteError(ProtodetError, FloatingPointError):
    pass


class DegenerateRoiError(ProtodetError, ValueError):
    pass


class BadShapeError(ProtodetError, ValueError):
    pass


class DuplicateClassError(ProtodetError, ValueError):
    pass


class EmptyClassError(ProtodetError, ValueError):
    def __init__(self, class_id: int):
        super().__init__(f"class {class_id} has no support instance")
        self.class_id = class_id


class EmptyGuidanceError(ProtodetError, ValueError):
    pass


class BadConfigError(ProtodetError, ValueError):
    pass
