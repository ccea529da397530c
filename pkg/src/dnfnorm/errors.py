"""Exception hierarchy.

Data problems (bad files, missing labels, wrong shapes) derive from
``DataError``; numerical failures (overflow, non-convergence, non-finite
gradients) derive from ``NumericError``.  The CLI maps the two families to
distinct exit codes.
"""


class DnfError(Exception):
    """Base class for all errors raised by this package."""


class DataError(DnfError):
    pass


class NumericError(DnfError):
    pass


class ParseError(DataError):
    """Malformed input file; ``location`` is a line number or byte offset."""

    def __init__(self, message, path=None, location=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if location is not None:
                where += f":{location}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.location = location


class DimensionMismatchError(DataError):
    pass


class MissingPriorError(DataError):
    def __init__(self, label):
        super().__init__(f"no prior mean for class label {label}")
        self.label = label


class MissingClassError(DataError):
    pass


class ZeroNormError(DataError):
    pass


class DegenerateScatterError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class SymmetryError(NumericError):
    pass


class IterationLimitError(NumericError):
    pass


class NonFiniteGradientError(NumericError):
    def __init__(self, index, where=None):
        msg = f"non-finite gradient at index {index}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)
        self.index = index
        self.where = where


class NumericOverflowError(NumericError):
    def __init__(self, block, detail="non-finite intermediate"):
        super().__init__(f"{detail} in flow block {block}")
        self.block = block


class TrainingDivergedError(NumericError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, epoch, checkpoint):
        super().__init__(f"non-finite loss during epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint
