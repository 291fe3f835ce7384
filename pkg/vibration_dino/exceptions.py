# -*- coding: utf-8 -*-


class VibrationDinoError(Exception):
    """
    Base exception for VibrationDino
    """
    pass


class ConfigurationError(VibrationDinoError):
    """
    Raised when a configuration value or combination of values is invalid
    """
    pass


class ParseError(VibrationDinoError):
    """
    Raised when a file cannot be parsed. Carries the 1-based ``line``
    for text formats and the byte ``offset`` for binary formats
    when known.
    """

    def __init__(self, message, line=None, offset=None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class EmptyInputError(VibrationDinoError):
    """
    Raised when an input holds no usable data
    """
    pass


class DomainError(VibrationDinoError, ValueError):
    """
    Raised when a numeric argument is outside the domain of an operation
    """
    pass


class ShapeError(VibrationDinoError, ValueError):
    """
    Raised when array or tensor shapes are incompatible
    """
    pass


class ContractError(VibrationDinoError):
    """
    Raised when a caller violates an operation precondition
    """
    pass


class TrainingDivergedError(VibrationDinoError):
    """
    Raised when training produces a non-finite loss. ``snapshot``
    is the path of the checkpoint written just before aborting.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
