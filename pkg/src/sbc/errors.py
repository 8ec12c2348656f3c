"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(ValueError):
    """A serialized artifact is malformed.

    ``offset`` carries the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during optimization."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class EmptyLayerError(RuntimeError):
    """Pruning would remove every unit or weight of some layer."""

    def __init__(self, message, survivors):
        super().__init__(message)
        self.survivors = survivors
