"""Exception hierarchy shared by all modules."""


class ProjPostError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ProjPostError, ValueError):
    """Invalid architecture, training, projector or run configuration."""


class ShapeError(ProjPostError, ValueError):
    """Array shapes do not match the network or operator."""


class OracleBudgetError(ProjPostError):
    """A dense oracle would exceed its configured size budget."""


class NumericError(ProjPostError, ArithmeticError):
    """Non-finite values or an ill-posed numerical quantity."""


class TrainingDiverged(NumericError):
    pass


class EstimationError(NumericError):
    pass


class DataFormatError(ProjPostError, ValueError):
    """A data file (IDX, CSV) is malformed."""


class CheckpointError(ProjPostError, ValueError):
    """A checkpoint or sample file is corrupt or malformed."""


class UnsupportedVersionError(CheckpointError):
    pass
