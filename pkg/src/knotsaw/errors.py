"""Exception types raised across the package.

Every error carries a short ``kind`` string so the command line can report
failures as machine-readable JSON.
"""


class KnotsawError(Exception):
    kind = "error"


class InvalidInput(KnotsawError, ValueError):
    kind = "invalid_input"


class InvalidParams(KnotsawError, ValueError):
    kind = "invalid_params"

    def __init__(self, param, message):
        super().__init__(f"{param}: {message}")
        self.param = param


class DegenerateBin(KnotsawError):
    kind = "degenerate_bin"

    def __init__(self, index, message=None):
        super().__init__(message or f"longitudinal bin {index} contains no points")
        self.index = index


class DegenerateCloud(KnotsawError):
    kind = "degenerate_cloud"


class PreconditionViolation(KnotsawError):
    kind = "precondition_violation"


class DegenerateCorner(KnotsawError):
    kind = "degenerate_corner"


class GridMismatch(KnotsawError):
    kind = "grid_mismatch"


class PatternDoesNotFit(KnotsawError):
    kind = "pattern_does_not_fit"

    def __init__(self, deficit_mm):
        super().__init__(f"sawing pattern exceeds the log radius by {deficit_mm:.3f} mm")
        self.deficit_mm = deficit_mm


class FormatError(KnotsawError, ValueError):
    kind = "format_error"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
