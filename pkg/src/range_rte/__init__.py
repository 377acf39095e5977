"""Range-based relative transform estimation.

Estimates the 4-DoF transform (3D translation + heading) between two
agents' local odometry frames from inter-agent range measurements, with
a Fisher-information analysis layer and a Monte-Carlo evaluation harness.
"""

from .estimators import (
    EstimateReport,
    QcqpProblem,
    assemble_qcqp,
    extract_transform,
    lift_transform,
    nls_estimate,
    qcqp_estimate,
    recover_rank_one,
    sdp_estimate,
    sliding_window_estimate,
    solve_qcqp,
    solve_sdp_relaxation,
)
from .fisher import (
    FimReport,
    SingularityFlags,
    confidence_intervals,
    det_fim_geometric,
    det_fim_subproblem,
    fim,
    range_jacobian,
    singularity_report,
)
from .geometry import (
    LeverArm,
    Pose,
    Transform4DoF,
    antenna_world_position,
    apply_transform,
    heading_rotation,
    interpolate_pose,
    wrap_angle,
)
from .measurement import (
    RangeSample,
    SquaredStats,
    SyncedDataset,
    SyncedSample,
    debias_squared,
    ingest_logs,
    motion_excitation_check,
    sliding_outlier_filter,
    true_range,
)
from .simulation import (
    DriftConfig,
    ErrorStats,
    ScenarioConfig,
    drift_scenario,
    generate_trajectory,
    monte_carlo_run,
    sample_ground_truth,
    singular_scenario,
    synthesize_measurements,
)
from .solvers import SdpStandardForm, SolveDiagnostics, eig_sym, lm_minimize, sdp_solve

__version__ = "0.1.0"
