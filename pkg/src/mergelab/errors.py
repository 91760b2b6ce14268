"""Exception taxonomy shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Array shapes are incompatible for the requested operation."""


class SingularMatrixError(RuntimeError):
    """A matrix expected to be positive definite failed factorization."""


class FormatError(ValueError):
    """A serialized file is malformed (bad magic, version, or truncation)."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
