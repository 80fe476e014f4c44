"""Exception hierarchy shared by all modules."""


class IobbaError(ValueError):
    """Base class for every error raised by this package."""


# trace
class MalformedRow(IobbaError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonMonotonicTimestamp(IobbaError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class OutOfRangeValue(IobbaError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidSpec(IobbaError):
    pass


# radio
class UserCountOutOfRange(IobbaError):
    pass


# detector
class InsufficientData(IobbaError):
    pass


class DegenerateSupport(IobbaError):
    pass


class FitDiverged(IobbaError):
    pass


class LengthMismatch(IobbaError):
    pass


class EmptyInput(IobbaError):
    pass


class ModelFormatError(IobbaError):
    pass


# policy
class InvalidThresholds(IobbaError):
    pass


class DegenerateLadder(IobbaError):
    pass


# simulator / qoe / cli
class ConfigInvalid(IobbaError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MalformedLog(IobbaError):
    pass


class EmptyGroup(IobbaError):
    pass
