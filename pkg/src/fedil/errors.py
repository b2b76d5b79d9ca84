"""Exception types shared across the simulator."""


class FedILError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedILError, ValueError):
    pass


class InputError(FedILError, ValueError):
    pass


class TrainingError(FedILError, RuntimeError):
    def __init__(self, message, client_id=None, round_idx=None):
        super().__init__(message)
        self.client_id = client_id
        self.round_idx = round_idx


class FormatError(FedILError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(FedILError, ValueError):
    def __init__(self, message, client_id=None):
        super().__init__(message)
        self.client_id = client_id


class InvariantViolation(FedILError, AssertionError):
    """Internal state broke a structural guarantee (e.g. double promotion)."""
