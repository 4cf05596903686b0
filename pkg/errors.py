"""Exception types shared by the simulator, the tuner and the command line."""


class MicrogridError(Exception):
    """Base class for every error raised by this project."""


class InvalidParameterError(MicrogridError, ValueError):
    pass


class MissingInputError(MicrogridError, KeyError):
    pass


class FisEncodingError(MicrogridError, ValueError):
    pass


class EmptyLogError(MicrogridError, ValueError):
    pass


class ConfigError(MicrogridError):
    pass


class MissingFisError(MicrogridError):
    pass


class NumericalDivergenceError(MicrogridError):
    """Raised when the plant state stops being finite (or the bus collapses)."""

    def __init__(self, time: float, detail: str = ""):
        self.time = time
        self.detail = detail
        message = f"simulation diverged at t={time:.6f} s"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)

    def __reduce__(self):
        # keeps the error picklable across process pools
        return (self.__class__, (self.time, self.detail))
