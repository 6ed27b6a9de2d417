"""Gradient-informed surrogate modeling on a parametric magnetostatic testbed.

A desk-scale pipeline: a parametric 2D field model supplies solutions and
exact parametric sensitivities; weighted POD compresses the fields;
Gaussian process regression (gradient-free or gradient-enhanced) maps
parameters to reduced coefficients and to scalar outputs; study drivers
compare both routes over nested training sets.
"""

from .exceptions import (
    DegenerateElementError,
    DimensionMismatchError,
    EigenConvergenceError,
    FitFailedError,
    MagpodError,
    NegativeVarianceError,
    NewtonDivergenceError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    RankDeficientWarning,
    SequenceExhaustedError,
    SingularTangentError,
    UnsupportedDimensionError,
    ZeroReferenceError,
)
from .gpr import (
    GaussianProcessSurrogate,
    KernelParams,
    build_covariance,
    rbf_kernel,
    rbf_kernel_jet,
)
from .linalg import (
    SpdFactorization,
    load_matrix,
    save_matrix,
    spd_factorize,
    spd_factorize_jittered,
    spd_solve,
    sym_eig,
)
from .pipeline import (
    Dataset,
    EvalReport,
    FieldSurrogate,
    basis_study,
    demo_one_dimensional,
    evaluate,
    generate_dataset,
    load_dataset,
    predict_field,
    save_dataset,
    timing_report,
    train_field_surrogate,
    train_kpi_surrogate,
)
from .pod import (
    SnapshotMatrix,
    WeightedPOD,
    build_snapshot_matrix,
    build_weight,
    project,
    project_sensitivities,
    reconstruct,
    relative_error,
)
from .sampling import DesignPlan, plan_dataset, scale_to_bounds, sobol_unit
from .testbed import (
    BRAUER_DEFAULTS,
    DEFAULT_BOUNDS,
    NU0,
    FieldSolution,
    KpiSample,
    ParamPoint,
    TestbedConfig,
    assemble,
    compute_kpi,
    is_feasible,
    solve,
    solve_sensitivities,
)

__version__ = "0.1.0"
