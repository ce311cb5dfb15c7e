"""Exception hierarchy.

Every error carries a ``category`` that the command line maps onto an exit code.
"""


class ImposterIdError(Exception):
    category = "internal"


class DataError(ImposterIdError, ValueError):
    category = "data"


class ZeroVectorError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class EmptyListError(DataError):
    pass


class SingleSpeakerError(DataError):
    pass


class SingleUtteranceError(DataError):
    pass


class TableLengthMismatchError(DataError):
    pass


class EmptyCohortError(DataError):
    pass


class DegenerateCohortError(DataError):
    pass


class MissingClassError(DataError):
    pass


class EmptyGridError(DataError):
    pass


class TooFewSetsError(DataError):
    pass


class InsufficientSpeakersError(DataError):
    pass


class InsufficientUtterancesError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class StaleTapeError(ShapeMismatchError):
    pass


class FormatError(ImposterIdError, ValueError):
    """Malformed file. ``offset`` is the byte (or line) position where parsing failed."""

    category = "format"

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.offset = offset


class ConfigError(ImposterIdError, ValueError):
    category = "config"

    def __init__(self, field, message):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field
