"""Error hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it:
0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
"""


class LPNetError(Exception):
    exit_code = 2


class UsageError(LPNetError):
    exit_code = 1


class DataError(LPNetError, ValueError):
    exit_code = 2


class NumericalError(LPNetError, ArithmeticError):
    exit_code = 3


class CorruptTensorError(DataError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ShapeMismatchError(DataError):
    def __init__(self, left, right, context='operands'):
        super().__init__(f"Shape mismatch between {context}: {tuple(left)} vs {tuple(right)}")
        self.left = tuple(left)
        self.right = tuple(right)


class DescriptorError(DataError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ''
        super().__init__(f"{prefix}{message}")
        self.message = message
        self.line = line
        self.field = field


class ContainerError(DataError):
    pass


class ChecksumError(ContainerError):
    pass


class OffGridError(DataError):
    pass


class AllocationError(DataError):
    pass


class StaleCacheError(DataError):
    pass


class CacheMissError(DataError):
    pass


class GradientError(NumericalError):
    def __init__(self, layer, message='non-finite gradient'):
        super().__init__(f"{message} in layer '{layer}'")
        self.layer = layer


class DivergenceError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
