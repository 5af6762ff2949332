class S2SError(Exception):
    """Base of every error raised by this package."""


class ConfigurationError(S2SError, ValueError):
    pass


class GridRangeError(S2SError, IndexError):
    pass


class IncompatibleGridError(S2SError):
    pass


class EncodingError(S2SError):
    pass


class ShapeError(S2SError):
    pass


class MalformedMessageError(S2SError):
    def __init__(self, message: str, offset: int):
        super().__init__(f'{message} (at byte {offset})')
        self.offset = offset


class WeightFileError(S2SError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f'{message} (at byte {offset})')
        self.offset = offset


class SceneParseError(S2SError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f'line {line}')
        if field:
            where.append(f'field {field}')
        super().__init__(f'{message} ({", ".join(where)})' if where else message)
        self.line = line
        self.field = field


class RecordParseError(S2SError):
    def __init__(self, message: str, line: int):
        super().__init__(f'{message} (line {line})')
        self.line = line


class CloudFileError(S2SError):
    pass


class BevFileError(S2SError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f'{message} (at byte {offset})')
        self.offset = offset


def with_context(error: S2SError, context: str) -> S2SError:
    """Prefix the message of ``error`` with where it happened, keeping its type and attributes."""
    message = error.args[0] if error.args else ''
    error.args = (f'{context}: {message}', *error.args[1:])
    return error
