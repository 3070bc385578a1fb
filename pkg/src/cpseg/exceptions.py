"""Exception hierarchy shared across the package."""


class CPSegError(Exception):
    """Base class for every error raised by cpseg."""


class DimensionError(CPSegError, ValueError):
    pass


class ShapeError(DimensionError):
    """Spatial dimensions that do not fit the patch or upsampling grid."""


class NumericError(CPSegError, ArithmeticError):
    pass


class ContractError(CPSegError, RuntimeError):
    pass


class LabelError(CPSegError, IndexError):
    pass


class DegenerateVectorError(NumericError):
    pass


class ConfigError(CPSegError, ValueError):
    pass


class EmptyPromptError(CPSegError, ValueError):
    pass


class TaxonomyError(ConfigError):
    pass


class GenerationError(CPSegError, RuntimeError):
    pass


class DatasetError(CPSegError, OSError):
    """Missing or unreadable dataset file; the message names the path."""


class ValidationError(CPSegError, ValueError):
    """A loaded dataset or checkpoint violates an invariant."""


class TrainingDivergedError(CPSegError, FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
