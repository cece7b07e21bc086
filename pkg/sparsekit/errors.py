"""
Exception hierarchy shared by all sparsekit modules.
"""

__all__ = ["SparseKitError",
           "ShapeError",
           "DomainError",
           "CorruptFormatError",
           "DegenerateTeacherError",
           "MissingTeacherError",
           "ConfigError",
           "PruningError",
           "ResourceError"]


class SparseKitError(Exception):
    """ Root of every error raised on purpose by sparsekit. """


class ShapeError(SparseKitError, ValueError):
    """ Dimension mismatch between arguments. """


class DomainError(SparseKitError, ValueError):
    """ Argument outside the domain of an operation. """


class CorruptFormatError(SparseKitError, ValueError):
    """ A compressed matrix or file violates its format invariants. """


class DegenerateTeacherError(SparseKitError, ArithmeticError):
    """ Teacher feature map is (numerically) zero over non-padding tokens. """


class MissingTeacherError(SparseKitError, ValueError):
    """ A distillation variant was requested without teacher outputs. """


class ConfigError(SparseKitError, ValueError):
    """ Unknown key or unparsable value in an experiment config. """


class PruningError(SparseKitError):
    """ Failure inside a pruning schedule, tagged with the sparsity level. """

    def __init__(self, level, cause):
        super().__init__(f"sparsity level {level}: {cause}")
        self.level = level
        self.cause = cause


class ResourceError(SparseKitError, MemoryError):
    """ Requested work would not fit in memory. """
