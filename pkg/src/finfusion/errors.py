"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf."""


class VocabularyError(ContractError):
    """A token id falls outside the fixed vocabulary."""


class ImputationRequiredError(ContractError):
    """An input still contains missing values that must be imputed first."""


class DegenerateInputError(ContractError):
    """Input is valid in shape but degenerate in value (e.g. a zero vector)."""


class UndefinedMetricError(ContractError):
    """The metric is undefined for this input (e.g. single-class labels)."""


class InsufficientTailDataError(ContractError):
    """Not enough tail observations to form a conditional estimate."""


class ScheduleError(ContractError):
    """Training stages were invoked out of order."""


class ConfigError(ValueError):
    """A configuration field is missing or outside its documented range."""


class SchemaError(ValueError):
    """Serialized artifact schema version does not match this build."""
