"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract."""


class ConfigError(ValueError):
    """Invalid configuration: ranks, targets, plan fields, file contents."""


class UnknownPlanError(ConfigError):
    """Requested plan name is not in the preset registry."""


class DivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or inconsistent."""
