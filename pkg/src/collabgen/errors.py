class ConfigError(ValueError):
    """Invalid configuration; CLI exit code 2."""


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact is absent; CLI exit code 3."""

    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; run `{producer}` first")
        self.path = path
        self.producer = producer


class NumericalError(RuntimeError):
    """Non-finite loss or activations; CLI exit code 4."""


class FrozenParameterError(RuntimeError):
    """A parameter that must stay frozen changed during training."""
