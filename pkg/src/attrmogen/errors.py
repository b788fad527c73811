"""Exception hierarchy shared by every subsystem.

The CLI prints ``<ClassName>: <message>`` on a single line, so class names are
part of the external contract.
"""


class AttrMoGenError(Exception):
    """Base class for all package errors."""


class ConfigError(AttrMoGenError, ValueError):
    pass


class ShapeError(AttrMoGenError, ValueError):
    pass


class ParameterError(AttrMoGenError, ValueError):
    pass


class SchemaError(AttrMoGenError, ValueError):
    pass


class PolicyError(AttrMoGenError, ValueError):
    pass


class NumericalError(AttrMoGenError, ArithmeticError):
    pass


class CorpusError(AttrMoGenError, ValueError):
    """Corpus content is invalid for the requested operation."""


class CorpusIOError(AttrMoGenError, OSError):
    pass


class CorpusVersionError(CorpusIOError):
    pass


class CorpusTruncatedError(CorpusIOError):
    pass


class CorpusOffsetError(CorpusIOError):
    pass


class CheckpointError(AttrMoGenError, OSError):
    pass
