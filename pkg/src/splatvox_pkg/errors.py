"""Exceptions raised across the package. The CLI maps them to exit codes."""

class SplatvoxError(Exception):
    """Base class for package errors."""
    exit_code = 1

class ConfigError(SplatvoxError, ValueError):
    """Invalid or inconsistent configuration."""
    exit_code = 2

class DataError(SplatvoxError, ValueError):
    """Missing, corrupt or malformed input data."""
    exit_code = 3

class NumericalError(SplatvoxError, ArithmeticError):
    """Non-finite values during optimization."""
    exit_code = 4

class StageError(SplatvoxError):
    """
    A pipeline stage failed for a given frame. The original exception is kept
    as __cause__ and decides the exit code.
    """

    def __init__(self, frame_index, stage, cause):
        self.frame_index = frame_index
        self.stage = stage
        super().__init__(f"Frame {frame_index}, stage '{stage}': {cause}")

    @property
    def exit_code(self):
        cause = self.__cause__
        return getattr(cause, "exit_code", 1)
