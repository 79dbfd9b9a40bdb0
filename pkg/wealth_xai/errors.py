"""Exception types shared by every stage.

Each error carries the process exit code the CLI should use, so library code can
raise the most specific type and the command layer only has to print and exit.
"""


class WealthXaiError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class UsageError(WealthXaiError):
    """Bad flags, unknown method names, unknown configuration keys."""

    exit_code = 1


class DataError(WealthXaiError, ValueError):
    """Malformed input, violated precondition, IO failure, or missing stage."""

    exit_code = 2


class MissingStageError(DataError):
    """A command needs the output of a stage that has not been run."""

    def __init__(self, stage: str, expected: str):
        super().__init__(f"missing stage: {stage} (expected output in {expected})")
        self.stage = stage
        self.expected = expected


class NumericError(WealthXaiError, ArithmeticError):
    """Non-finite losses, divergent optimisation, degenerate statistics."""

    exit_code = 3
