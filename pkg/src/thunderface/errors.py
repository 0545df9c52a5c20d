"""Exception hierarchy shared by all modules."""


class ThunderError(Exception):
    """Base class for errors raised by thunderface."""


class InvalidArgument(ThunderError, ValueError):
    pass


class NotFound(ThunderError, KeyError):
    def __str__(self):
        # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FormatError(ThunderError):
    """A persisted file has the wrong magic, version, or is truncated."""


class DegenerateInput(ThunderError, ValueError):
    pass


class TrainingDiverged(ThunderError, RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


class LineageError(InvalidArgument):
    """Checkpoint and corpus/codebook identifiers disagree."""
