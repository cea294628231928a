"""Exception hierarchy shared by every dfmnet module."""


class DfmError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(DfmError, ValueError):
    pass


class InvalidConfig(DfmError, ValueError):
    pass


class NumericalError(DfmError, ArithmeticError):
    pass


class EmptyTape(DfmError, RuntimeError):
    pass


class ModeMismatch(DfmError, ValueError):
    pass


class EmptyDataset(DfmError, ValueError):
    pass


class EmptySet(DfmError, ValueError):
    pass


class CorruptFile(DfmError, IOError):
    pass


class UnknownVersion(CorruptFile):
    pass


class DuplicateName(CorruptFile):
    pass


class DataError(DfmError, IOError):
    """Problems with user-supplied inputs (CLI exit code 2)."""


class DecodeError(DataError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass
