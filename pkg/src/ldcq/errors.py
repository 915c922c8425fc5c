"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Input has the wrong width, length or range for the operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or unknown."""


class TrainingDivergenceError(RuntimeError):
    """A loss or gradient became non-finite during training."""


class EmptyOutputError(ValueError):
    """An operation would produce no output for the given inputs."""


class DependencyError(RuntimeError):
    """A pipeline stage is missing an upstream artifact."""

    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} requires {missing!r}, which has not been produced")
        self.stage = stage
        self.missing = missing
