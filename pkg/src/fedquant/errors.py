"""Exception types shared across the package."""


class FedQuantError(Exception):
    """Base class for all package errors."""


class DegenerateTensor(FedQuantError):
    """Raised when a clipping threshold is undefined (all-zero tensor)."""


class NonFiniteInput(FedQuantError, ValueError):
    pass


class CorruptPayload(FedQuantError, ValueError):
    pass


class EncodeError(FedQuantError, ValueError):
    pass


class ShapeError(FedQuantError, ValueError):
    pass


class EmptyDataset(FedQuantError, ValueError):
    pass


class FormatError(FedQuantError, ValueError):
    pass


class PartitionError(FedQuantError, ValueError):
    pass


class ConfigError(FedQuantError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
