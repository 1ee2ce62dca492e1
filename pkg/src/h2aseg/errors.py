"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An inter-module contract was broken (shape, layout, or value range)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration. CLI maps this to exit code 2."""


class NumericError(RuntimeError):
    """Non-finite values encountered during optimization. CLI exit code 3."""


class CheckpointMismatchError(ValueError):
    """Checkpoint incompatible with the requested model configuration."""

    def __init__(self, differing_keys: dict):
        self.differing_keys = dict(differing_keys)
        details = ", ".join(
            f"{k}: checkpoint={v[0]!r} requested={v[1]!r}"
            for k, v in sorted(self.differing_keys.items())
        )
        super().__init__(f"checkpoint/config mismatch: {details}")
