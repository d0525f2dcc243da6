"""Exception hierarchy shared by every module.

The CLI maps ``ConfigError`` to exit code 1 and every other error to 2.
"""
from __future__ import annotations
from typing import Any, Dict, Optional


class JumpDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(JumpDistillError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class InputShapeError(JumpDistillError, ValueError):
    pass


class DomainError(JumpDistillError, ValueError):
    pass


class ArgumentError(JumpDistillError, ValueError):
    pass


class UnsupportedVariantError(JumpDistillError):
    pass


class InvariantViolation(JumpDistillError, AssertionError):
    pass


class NonFiniteError(JumpDistillError, FloatingPointError):
    """Raised on NaN/Inf in gradients, losses or solver states.

    ``block`` names the parameter block (optimizer path); ``record`` carries
    the draw record of the offending item (loss path).
    """

    def __init__(self, message: str, block: Optional[str] = None, record: Optional[Dict[str, Any]] = None):
        self.block = block
        self.record = record
        super().__init__(message)


class CheckpointError(JumpDistillError):
    def __init__(self, path, message: str = "checkpoint not found"):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


__all__ = [
    "JumpDistillError",
    "ConfigError",
    "InputShapeError",
    "DomainError",
    "ArgumentError",
    "UnsupportedVariantError",
    "InvariantViolation",
    "NonFiniteError",
    "CheckpointError",
]
