"""Exception types raised across the package."""


class CCSSLError(Exception):
    """Base class for all package errors."""


class DimensionError(CCSSLError, ValueError):
    pass


class ContractError(CCSSLError, ValueError):
    pass


class DegenerateEmbeddingError(CCSSLError, ValueError):
    pass


class ConfigError(CCSSLError, ValueError):
    pass


class FormatError(CCSSLError, ValueError):
    pass


class TrainingDivergenceError(CCSSLError, FloatingPointError):
    """A loss component became NaN or infinite."""

    def __init__(self, component, value, dump_path=None):
        self.component = component
        self.value = value
        self.dump_path = dump_path
        msg = f"non-finite {component}: {value!r}"
        if dump_path is not None:
            msg += f" (batch dumped to {dump_path})"
        super().__init__(msg)
