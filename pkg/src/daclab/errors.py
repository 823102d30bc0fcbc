"""Exception hierarchy shared across the package."""


class DaclabError(Exception):
    """Base class for all errors raised by daclab."""


class ShapeError(DaclabError, ValueError):
    """Operands have incompatible shapes."""


class GradientError(DaclabError, RuntimeError):
    """Backward pass or optimizer misuse (non-scalar loss, missing gradient)."""


class FormatError(DaclabError, ValueError):
    """A file or message could not be parsed (bad magic, truncation, CRC)."""


class ArchMismatchError(DaclabError, ValueError):
    """Architecture hash in a file or message does not match the expected one."""

    def __init__(self, expected: str, found: str, what: str = "model"):
        self.expected = expected
        self.found = found
        super().__init__(
            f"{what}: architecture hash mismatch (expected {expected}, found {found})"
        )


class ProtocolError(DaclabError, RuntimeError):
    """A DCL protocol invariant was violated."""


class ConfigError(DaclabError, ValueError):
    """Invalid experiment configuration; carries field-level diagnostics."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
