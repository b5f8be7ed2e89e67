from typing import Any, Optional


class SlimError(Exception):
    """Base class for every error raised by slimkit"""


class DimensionError(SlimError, ValueError):
    """
    Shape mismatch in a tensor operation

    Carries the operation name plus the expected and received shapes so
    callers can report them without parsing the message.
    """

    def __init__(self, op: str, expected: Any, got: Any, detail: Optional[str] = None):
        self.op = op
        self.expected = expected
        self.got = got
        message = f"{op}: expected {expected}, got {got}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class TokenError(SlimError, ValueError):
    def __init__(self, token: int, position: int, vocab: int):
        self.token = token
        self.position = position
        self.vocab = vocab
        super().__init__(f"token {token} at position {position} outside [0, {vocab})")


class TapeError(SlimError, RuntimeError):
    pass


class ConfigError(SlimError, ValueError):
    pass


class ReplayMismatchError(SlimError, RuntimeError):
    """Backward replay of a chunk diverged from its forward pass"""


class CheckpointError(SlimError, ValueError):
    pass
