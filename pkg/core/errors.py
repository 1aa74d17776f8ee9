"""Exception hierarchy for the federated simulator."""


class FedTalkError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(FedTalkError):
    """Invalid or unreadable experiment configuration."""

    def __init__(self, message: str, path: str = "", line: int = 0):
        self.path = path
        self.line = line
        location = f"{path}:{line}: " if path else ""
        super().__init__(f"{location}{message}")


class ShapeMismatchError(FedTalkError, ValueError):
    """Array shapes or vector lengths do not agree."""


class DegenerateProbeError(FedTalkError, ValueError):
    """A probe embedding has zero norm, so a cosine is undefined."""


class EmptySplitError(FedTalkError, ValueError):
    """A dataset split needed by an operation has no clips."""


class ClientDivergedError(FedTalkError):
    """Local training produced a non-finite loss."""

    def __init__(self, client_id: int, step: int):
        self.client_id = client_id
        self.step = step
        super().__init__(f"client {client_id} diverged at local step {step}")


class AggregationError(FedTalkError):
    """The server could not form a finite aggregate for a round."""


class MaskingError(FedTalkError, ValueError):
    """Secure-aggregation bookkeeping is inconsistent."""


class CheckpointFormatError(FedTalkError, ValueError):
    """A flat binary file does not match the expected layout."""


class NonFiniteLossError(FedTalkError, ArithmeticError):
    """A loss term evaluated to NaN or infinity."""
