"""
Exception hierarchy for the scaling-loss pipeline.

Every error carries the process exit code the CLI should use and can be
rendered as a JSON detail object.
"""

from typing import Dict, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_ANALYSIS = 3
EXIT_INTERNAL = 4


class ScalingLossError(Exception):
    """Base class for all pipeline errors"""

    exit_code = EXIT_INTERNAL

    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def to_dict(self) -> Dict:
        data = {"error": type(self).__name__, "message": self.message}
        data.update(self.detail)
        return data


class ConfigError(ScalingLossError):
    exit_code = EXIT_USAGE


class SketchError(ScalingLossError):
    """Syntax or semantic error in a sketch, with its location"""

    exit_code = EXIT_INPUT

    def __init__(self, message: str, file: str = "<sketch>", line: int = 0, column: int = 0):
        super().__init__(message, file=file, line=line, column=column)
        self.file = file
        self.line = line
        self.column = column

    def __str__(self):
        return f"{self.file}:{self.line}:{self.column}: {self.message}"


class EvalError(ScalingLossError):
    exit_code = EXIT_INPUT


class LinkError(ScalingLossError):
    exit_code = EXIT_INPUT


class ProfileFormatError(ScalingLossError):
    """Malformed profile file; line is 1-based within the file"""

    exit_code = EXIT_INPUT

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message, path=path, line=line)
        self.path = path
        self.line = line

    def __str__(self):
        if self.line is not None:
            return f"{self.path}:{self.line}: {self.message}"
        return self.message


class ScenarioError(ScalingLossError):
    """Malformed or inconsistent simulation scenario"""

    exit_code = EXIT_INPUT


class ResolutionError(ScalingLossError):
    exit_code = EXIT_ANALYSIS


class MatchError(ScalingLossError):
    exit_code = EXIT_ANALYSIS


class CollectiveMismatchError(ScalingLossError):
    exit_code = EXIT_ANALYSIS


class FitError(ScalingLossError):
    exit_code = EXIT_ANALYSIS


class DetectionError(ScalingLossError):
    exit_code = EXIT_ANALYSIS


class SimulationError(ScalingLossError):
    exit_code = EXIT_ANALYSIS


class DeadlockError(SimulationError):
    """No rank can advance while operations are still pending"""

    def __init__(self, message: str, stuck: Dict[int, str]):
        super().__init__(message, stuck={str(rank): where for rank, where in sorted(stuck.items())})
        self.stuck = dict(stuck)
