"""Exception hierarchy shared by every module."""


class PartialFedError(Exception):
    """Base class for all errors raised by this package."""


class SchemaViolation(PartialFedError):
    """Parameters, masks or buffers that do not conform to a model schema."""


class AggregationInputError(PartialFedError):
    """Empty update lists, zero total weight and similar aggregation misuse."""


class PartitionError(PartialFedError):
    pass


class ConfigError(PartialFedError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ContractViolation(PartialFedError):
    """A trainer or helper was called outside its documented contract."""


class EvaluationError(PartialFedError):
    pass


class ProtocolError(PartialFedError):
    """Malformed or misordered wire traffic. ``check`` names the failed test."""

    def __init__(self, check, message=""):
        self.check = check
        super().__init__(f"protocol check failed [{check}]" + (f": {message}" if message else ""))


class IncompleteFrame(ProtocolError):
    """Not enough bytes for a full frame yet; feed more and retry."""

    def __init__(self, needed):
        self.needed = needed
        super().__init__("incomplete", f"need {needed} more bytes")


class ClientFailure(PartialFedError):
    def __init__(self, client_id, round_idx, reason):
        self.client_id = client_id
        self.round_idx = round_idx
        super().__init__(f"client {client_id!r} failed in round {round_idx}: {reason}")
