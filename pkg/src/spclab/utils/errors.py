"""Custom exceptions for spclab"""


class SpcError(Exception):
    """Base exception for all spclab errors"""
    pass


class ContractViolationError(SpcError):
    """Raised when a caller breaks an operation's precondition"""
    pass


class ShapeMismatchError(ContractViolationError):
    """Raised when array shapes are incompatible for an operation"""
    pass


class InvalidStateError(SpcError):
    """Raised when an object's invariant is found broken"""
    pass


class ProtocolOrderError(SpcError):
    """Raised when the teacher protocol (observe, sample, report) is called out of order"""
    pass


class NoCentersError(SpcError):
    """Raised when assigning a context against a tree with no published centers"""
    pass


class NumericFailureError(SpcError):
    """Raised when a computation produces NaN or Inf

    Attributes:
        op: Tag of the operation that produced the non-finite value
    """

    def __init__(self, message: str, op: str = "unknown"):
        super().__init__(message)
        self.op = op


class OnPolicyViolationError(SpcError):
    """Raised when a PPO update is attempted on a stale or already-used batch"""
    pass


class ConfigError(SpcError):
    """Raised when an experiment configuration is malformed"""
    pass


class CheckpointError(SpcError):
    """Raised when a checkpoint is missing, corrupt or incompatible"""
    pass


class RoundAbortedError(SpcError):
    """Raised when a teacher round fails part-way

    Attributes:
        round_index: Index of the aborted round
        phase: Protocol phase that failed (e.g. 'context', 'train', 'evaluate')
    """

    def __init__(self, round_index: int, phase: str, cause: Exception):
        super().__init__(f"Round {round_index} aborted during '{phase}': {cause}")
        self.round_index = round_index
        self.phase = phase
        self.cause = cause
