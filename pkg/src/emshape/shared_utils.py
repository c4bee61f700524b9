"""
Shared utility functions for emshape.

This module contains the exception hierarchy and the common error handling
used by the command-line entry point and the tool server, so both surfaces
report failures the same way.
"""

import hashlib
import logging
from typing import Any, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


class EmshapeError(Exception):
    """Base class for all errors raised by emshape."""

    error_type = "general"


class MeshFormatError(EmshapeError):
    """Malformed `emsh 1` input."""

    error_type = "input"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(EmshapeError):
    """A mesh violates one of its structural invariants."""

    error_type = "input"

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


class TemplateError(EmshapeError):
    """Infeasible template geometry parameters."""

    error_type = "input"


class ConfigError(EmshapeError):
    """Invalid or inconsistent run configuration."""

    error_type = "input"


class SolverError(EmshapeError):
    """Linear or Newton solve that did not meet its tolerance."""

    error_type = "solver"

    def __init__(self, message: str, residual: float = float("nan"),
                 history: Optional[List[float]] = None, step: Optional[int] = None,
                 iteration: Optional[int] = None):
        self.base_message = message
        self.residual = residual
        self.history = list(history or [])
        self.step = step
        self.iteration = iteration
        super().__init__(self._format())

    def _format(self) -> str:
        parts = []
        if self.iteration is not None:
            parts.append(f"iteration {self.iteration}")
        if self.step is not None:
            parts.append(f"step {self.step}")
        prefix = f"[{', '.join(parts)}] " if parts else ""
        return f"{prefix}{self.base_message} (residual {self.residual:.3e})"

    def with_step(self, step: int) -> "SolverError":
        """Annotate with the time-step index, keeping the innermost one."""
        if self.step is None:
            self.step = step
            self.args = (self._format(),)
        return self

    def with_iteration(self, iteration: int) -> "SolverError":
        """Annotate with the optimizer iteration index."""
        if self.iteration is None:
            self.iteration = iteration
            self.args = (self._format(),)
        return self


class GradientCheckError(EmshapeError):
    """Finite-difference gate exceeded."""

    error_type = "gate"


EXIT_CODES = {
    "success": 0,
    "general": 1,
    "input": 2,
    "solver": 3,
    "gate": 4,
}


def array_fingerprint(*arrays: np.ndarray) -> str:
    """
    Content hash of one or more arrays.

    Used for cache keys of sparse factorizations: two matrices with the same
    structure and values produce the same key.
    """
    digest = hashlib.md5()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def handle_run_error(operation: str, error: Exception) -> Dict[str, Any]:
    """
    Standardized error handling across the CLI and the tool server.

    Args:
        operation: Description of the operation that failed
        error: The exception that occurred

    Returns:
        Standardized error response dictionary
    """
    error_message = str(error)
    logger.error(f"Error in {operation}: {error_message}")

    if isinstance(error, EmshapeError):
        error_type = error.error_type
    elif isinstance(error, (FileNotFoundError, IsADirectoryError, PermissionError)):
        error_type = "input"
    else:
        error_type = "general"

    result: Dict[str, Any] = {
        "error": f"Error in {operation}: {error_message}",
        "error_type": error_type,
        "operation": operation,
    }
    if isinstance(error, SolverError):
        result["residual"] = error.residual
        if error.step is not None:
            result["step"] = error.step
        if error.iteration is not None:
            result["iteration"] = error.iteration
    return result


def exit_status(result: Dict[str, Any]) -> int:
    """Map a result dictionary to a process exit status."""
    if "error_type" not in result:
        return EXIT_CODES["success"]
    return EXIT_CODES.get(result["error_type"], EXIT_CODES["general"])
