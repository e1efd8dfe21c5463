"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries one.
"""


class ScoreDistError(Exception):
    exit_code = 2


class UsageError(ScoreDistError):
    exit_code = 1


class DataError(ScoreDistError):
    exit_code = 2


class InvalidAnnotationError(DataError):
    pass


class DegeneratePredictionError(DataError):
    pass


class ShapeError(DataError):
    pass


class ResolutionError(ShapeError):
    pass


class ParseError(DataError):
    """Malformed input file; ``problems`` holds ``(line_number, message)`` pairs."""

    def __init__(self, path, problems):
        self.path = str(path)
        self.problems = list(problems)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.problems[:20])
        more = "" if len(self.problems) <= 20 else f" (+{len(self.problems) - 20} more)"
        super().__init__(f"{self.path}: {lines}{more}")


class CheckpointError(DataError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class StageOrderError(UsageError):
    pass


class NumericalError(ScoreDistError):
    exit_code = 3
