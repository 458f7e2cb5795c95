"""Deterministic machinery and Monte Carlo harness for general Wigner-type matrices."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AssumptionViolated,
    CuspSuspect,
    DataContractViolation,
    DegenerateInput,
    EigenFailure,
    HalfPlaneViolation,
    InputError,
    InsufficientGrid,
    MultiCut,
    NearSingular,
    NonConvergence,
    NumericalError,
    OutOfGrid,
    ParticleCollision,
    PowerIterationStall,
    QuadratureNonConvergence,
    StencilOutOfRange,
    WigtypeError,
    WindowTooNarrow,
)
from .profiles import BlockStructure, Cumulants, VarianceProfile  # noqa: F401
from .qve import (  # noqa: F401
    QveSolution,
    SolverOptions,
    boundary_values,
    perturbation_gap,
    solve_boundary,
    solve_grid,
    solve_qve,
    stieltjes_derivative,
)
from .spectrum import (  # noqa: F401
    SpectralData,
    SupportCertificate,
    compute_spectral_data,
    density_of_states,
    detect_support,
    edge_fit,
    quantiles,
)
from .freeconv import (  # noqa: F401
    FreeConvolution,
    burgers_residual,
    characteristic,
    convolve,
    diagonal_variant_gap,
    find_epsilon_star,
    stieltjes_via_subordination,
    subordination_residual,
)
from .stability import (  # noqa: F401
    StabilityOperator,
    VarianceKernels,
    boundary_singularity,
    build_stability,
    edge_eigvec_relation,
    kernels,
    stab_resolvent_apply,
)
from .testfn import (  # noqa: F401
    TestFunction,
    make_half_regular_bump,
    make_mollified_step,
    make_regular_bump,
    testfn_from_dict,
)
from .lss import (  # noqa: F401
    dbm_gaussian_variance,
    dbm_gaussian_variance_numeric,
    expectation_correction,
    h12_form,
    hs_reconstruct,
    integrate_against_density,
    logdet_derivative_pair,
    propagate_test_function,
    sev_expectation,
    suggest_l_star,
    variance_hat,
)
from .ensemble import (  # noqa: F401
    DbmState,
    EnsembleSpec,
    McResult,
    counting_statistic,
    dbm_run,
    eigen_spectrum,
    law_cumulants,
    lss_statistic,
    mc_harness,
    sample_matrix,
    sev_statistic,
    txy_diagnostic,
)
