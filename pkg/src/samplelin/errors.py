"""Exception hierarchy shared by all modules."""


class SampleLinError(Exception):
    """Base class for every error raised by samplelin."""


class ContractError(SampleLinError, ValueError):
    """Shapes or lengths of arguments do not match the operator."""


class ParameterError(SampleLinError, ValueError):
    """A hyperparameter is outside its admissible range."""


class FactorizationError(SampleLinError, ArithmeticError):
    """A matrix that must be positive definite could not be factorised."""


class DegenerateDataError(SampleLinError, ValueError):
    """The data make an update undefined (e.g. a zero posterior mean)."""


class DivergenceError(SampleLinError, RuntimeError):
    """An iterative optimiser blew up."""


class NumericalError(SampleLinError, ArithmeticError):
    """Non-finite values appeared inside an iterative solver."""


class ModelDefinitionError(SampleLinError, ValueError):
    """A differentiable model's jvp/vjp pair is inconsistent."""


class SchemaError(SampleLinError, ValueError):
    """A file does not follow the expected CSV layout."""
