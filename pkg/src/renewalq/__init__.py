"""Open quantum system dynamics at small dimension.

Two families of dynamics share one numerical toolbox:

* Lindblad semigroup evolution, solved through its trajectory representation
  (jump expansion, demixture over conditional states, Monte Carlo sampling,
  Poisson-reference reweighting, renewal reduction of fixed-output jumps);
* renewal-type collisional dynamics built from an intercollision map family,
  a collision channel and a waiting-time distribution, with four mutually
  cross-validating solvers (trajectory series, integral-equation marching,
  Laplace resolvent inversion, Monte Carlo).
"""

from .qmatrix import (
    DensityMatrix,
    devectorize,
    mat_exp,
    min_eigenvalue_hermitian,
    trace_distance,
    vectorize,
)
from .channels import (
    CptpReport,
    LindbladGenerator,
    NullOutcome,
    SuperOperator,
    certify_cptp,
    choi,
    fixed_output_detect,
    jump_superop,
    liouvillian,
    normalize_apply,
    relaxation_semigroup,
)
from .renewal import (
    Erlang,
    Exponential,
    Tabulated,
    Trajectory,
    WaitingTime,
    sample_renewal,
    trajectory_density,
)
from .lindblad_traj import (
    PoissonReference,
    RenewalReduction,
    demixture_reassemble,
    dyson_solve,
    dyson_terms,
    exclusive_density,
    mc_average,
    poisson_unnormalized_state,
    renewal_reduction,
    sample_trajectory,
    survival_probability,
    trajectory_decompose,
)
from .collisional import (
    CollisionalModel,
    ContourError,
    IntercollisionFamily,
    LaplaceInversionConfig,
    SemigroupFamily,
    SolverError,
    SolverGrid,
    StepSizeError,
    TabulatedFamily,
    UnsupportedModelError,
    certify_dynamics,
    identity_family,
    integrodiff_residual,
    laplace_solve,
    markov_limit_generator,
    mc_solve,
    series_solve,
    volterra_solve,
)

__version__ = "0.1.0"
