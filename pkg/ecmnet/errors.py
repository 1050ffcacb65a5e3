# ecmnet/errors.py
"""Exception hierarchy shared by the library and the command line."""


class ECMNetError(Exception):
    """Root of every error raised by ecmnet"""


class ConfigError(ECMNetError, ValueError):
    """Invalid configuration, unknown key or inconsistent shapes"""


class InputSizeError(ConfigError):
    """Spatial input size the network cannot process"""

    def __init__(self, height, width, multiple):
        self.height = height
        self.width = width
        self.multiple = multiple
        super().__init__(
            f"Input size {height}x{width} is not divisible by {multiple}; "
            f"height and width must be multiples of {multiple}"
        )


class NumericalError(ECMNetError, FloatingPointError):
    """Non-finite values reached a numerical kernel"""


class DataError(ECMNetError, ValueError):
    """Dataset files missing, misaligned or carrying unknown label values"""


class MetricError(ECMNetError, ValueError):
    """Predictions or labels outside the class range"""


class CheckpointError(ECMNetError):
    """Checkpoint missing or incompatible with the active configuration"""


class TrainingDivergedError(ECMNetError, FloatingPointError):
    """Loss became NaN or infinite during optimisation"""

    def __init__(self, iteration, lr, grad_norm, loss_value):
        self.iteration = iteration
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss_value = loss_value
        super().__init__(
            f"Training diverged at iteration {iteration}: loss={loss_value} "
            f"lr={lr:.3e} grad_norm={grad_norm}"
        )
