"""Exception hierarchy shared by every stairlab module."""


class StairlabError(Exception):
    """Base class for all library errors."""


class DimensionError(StairlabError, ValueError):
    pass


class MaskingError(StairlabError, ValueError):
    pass


class DegenerateBatchError(StairlabError, ValueError):
    pass


class NumericError(StairlabError, FloatingPointError):
    pass


class OraclePreconditionError(StairlabError, RuntimeError):
    pass


class ConfigError(StairlabError, ValueError):
    pass


class VocabularyError(StairlabError, ValueError):
    pass


class SpecError(StairlabError, ValueError):
    pass


class IngestionError(StairlabError, ValueError):
    pass


class SchedulerError(StairlabError, RuntimeError):
    """A staircase window invariant was violated at run time."""


class CheckpointError(StairlabError, ValueError):
    pass
