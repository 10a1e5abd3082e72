"""Sample-based inference and prior-precision selection for large conjugate
Gaussian linear models, with a linearised-Laplace adapter for small
differentiable predictors."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ContractError,
    DegenerateDataError,
    DivergenceError,
    FactorizationError,
    ModelDefinitionError,
    NumericalError,
    ParameterError,
    SampleLinError,
    SchemaError,
)
from .model import (  # noqa: E402
    Dataset,
    DenseDesign,
    DesignOperator,
    NoisePrecision,
    PriorPrecision,
    Problem,
    apply_design,
    apply_design_transpose,
    apply_gprior,
    gprior_exact,
    gprior_sampled,
    sample_noise,
    sample_prior,
)
from .oracle import evidence_bound, exact_effective_dim, exact_em, exact_posterior, exact_sample  # noqa: E402
from .sampler import SampleSet, SgdConfig, draw_samples, sgd_minimize  # noqa: E402
from .em import EmState, estimate_gamma, mstep_update, run_em  # noqa: E402
from .dual import build_preconditioner, matheron_sample, pcg_solve, run_dual_em  # noqa: E402
