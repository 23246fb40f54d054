"""Concave (cone) regression: projection of a signal onto the cone of concave sequences.

Two solver families are provided. Asymptotic solvers (Hildreth, Dykstra,
LSPS, Uzawa, ADMM) converge in the limit; finite solvers (MPDB, Meyer,
critical-index, block active-set) terminate with the exact projection. An
exhaustive oracle, a linear-time warm start and a benchmark harness
complete the package.
"""
from .asymptotic import (
    admm_penalty,
    admm_solve,
    dual_spectral_bound,
    dykstra_solve,
    hildreth_solve,
    lsps_solve,
    project_single,
    uzawa_solve,
)
from .benchmark import (
    SOLVERS,
    ExperimentRecord,
    SignalSpec,
    export_records,
    export_summary,
    generate_signal,
    import_records,
    reference_solution,
    run_grid,
)
from .errors import (
    ConeRegressionError,
    InvalidSignalError,
    NotPositiveDefiniteError,
    OracleError,
    RankDeficientError,
    ReferenceDisagreementError,
    SingularBlockSystemError,
    SingularUpdateError,
    StalledSearchError,
    StepSizeError,
)
from .finite import (
    ActiveSet,
    BlockPartition,
    MixedBasis,
    block_active_set_solve,
    critical_index_solve,
    meyer_solve,
    mpdb_solve,
    solve_block_system,
)
from .geometry import (
    KKT_TOL,
    ConeSystem,
    KktCertificate,
    MoreauSplit,
    Signal,
    build_cone_system,
    kkt_certificate,
    moreau_split,
    project_equality,
    recover_multipliers,
    weighted_sse,
)
from .kernels import (
    BandedSPD,
    TrackedInverse,
    TrackedPinv,
    banded_spd_solve,
    cholesky_pinv,
    pinv_append_column,
    qr_restricted_solve,
    sherman_morrison_update,
)
from .trace import IterControl, SolverResult, SolverTrace, TraceSample
from .warmstart import brute_force_project, pav_warm_start

__version__ = "0.1.0"
