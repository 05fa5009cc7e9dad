"""Exception hierarchy shared by the library modules and the commands."""


class MagShieldError(Exception):
    """Root of every error raised by the toolkit."""


class ConfigError(MagShieldError, ValueError):
    pass


class DegenerateAxisError(MagShieldError, ValueError):
    def __init__(self, message: str = "degenerate axis"):
        super().__init__(message)


class InitializationError(MagShieldError):
    pass


class CorruptFrameError(MagShieldError, ValueError):
    def __init__(self, message: str = "corrupt frame"):
        super().__init__(message)


class SingularFieldError(MagShieldError, ValueError):
    def __init__(self, message: str = "evaluation inside singular radius"):
        super().__init__(message)


class TrajectoryError(MagShieldError, ValueError):
    pass


class DatasetError(MagShieldError):
    pass


class NumericalBlowUpError(MagShieldError, FloatingPointError):
    """Non-finite activation inside the corrector network."""

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"numerical blow-up in layer '{layer}'")


class TrainingDivergedError(MagShieldError):
    pass


class PipelineStateError(MagShieldError, RuntimeError):
    pass


class FormatError(MagShieldError, ValueError):
    pass
