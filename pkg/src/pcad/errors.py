class DataError(ValueError):
    """Input data or file contents violate a format or precondition."""


class CloudFormatError(DataError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class BankFormatError(DataError):
    pass


class InvariantError(RuntimeError):
    """An internal postcondition failed; indicates a bug, not bad input."""
