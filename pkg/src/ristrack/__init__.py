"""Bayesian tracking of a mobile user over RIS reflection paths.

A base station illuminates several reconfigurable intelligent surfaces
(RIS) whose reflections reach a moving user terminal; the user's
position is tracked from the arrival angles of those reflections.  The
package provides:

- ``geometry``: array steering vectors and arrival-cosine geometry;
- ``signal``: scene configuration, channel synthesis, trajectories;
- ``aoa``: variational multi-path arrival-cosine estimation with
  von Mises angle messages;
- ``tracker``: per-slot message passing that fuses angle posteriors
  with a random-walk motion prior;
- ``crb``: Fisher information and recursive Bayesian error bounds;
- ``beamforming``: directional and bound-optimized RIS/BS beam design;
- ``harness``: seeded Monte Carlo experiments with CSV output;
- ``reporting``: figure rendering from result tables;
- ``cli``: the ``ristrack`` command.
"""

from .aoa import (
    AoaPosterior,
    VonMisesMsg,
    estimate,
    expected_steering,
    fused_belief,
    vm_circular_moment,
    vm_extrinsic,
    vm_multiply,
    wrap_angle,
)
from .beamforming import (
    BeamPlan,
    GainPredictor,
    calibrate_gain,
    directional_bs_beam,
    directional_pbf,
    directional_plan,
    estimate_aod,
    optimize_p1_agdm,
    optimize_p2_weights,
    predict_gains,
    predicted_position_bound,
    random_plan,
)
from .crb import (
    FimMatrix,
    ParamVector,
    aoa_bound,
    bfim_step,
    fim_single_slot,
    initial_bfim,
    position_bcrb,
)
from .geometry import (
    aoa_cosine,
    aoa_gradient,
    as_position,
    as_unit,
    line_spectrum,
    steering,
)
from .harness import (
    CSV_COLUMNS,
    MODES,
    ExperimentSpec,
    MetricsRow,
    bound_curve,
    compute_rmse,
    demo_scene,
    demo_tracker,
    run_baseline,
    run_experiment,
    write_csv,
)
from .signal import (
    SceneConfig,
    SlotGroundTruth,
    dbm_to_watts,
    default_scene,
    equivalent_gain,
    free_space_gain,
    generate_trajectory,
    slot_truth,
    synthesize,
    watts_to_dbm,
)
from .tracker import (
    GaussianMsg,
    SlotEstimate,
    TrackerConfig,
    TrackerState,
    cavity_product,
    gaussian_fuse,
    init_matching,
    init_state,
    likelihood_product_gaussian,
    markov_predict,
    position_to_angle_vm,
    run_slot,
)

__version__ = "0.1.0"

__all__ = [
    "AoaPosterior",
    "BeamPlan",
    "CSV_COLUMNS",
    "ExperimentSpec",
    "FimMatrix",
    "GainPredictor",
    "GaussianMsg",
    "MODES",
    "MetricsRow",
    "ParamVector",
    "SceneConfig",
    "SlotEstimate",
    "SlotGroundTruth",
    "TrackerConfig",
    "TrackerState",
    "VonMisesMsg",
    "aoa_bound",
    "aoa_cosine",
    "aoa_gradient",
    "as_position",
    "as_unit",
    "bfim_step",
    "bound_curve",
    "calibrate_gain",
    "cavity_product",
    "compute_rmse",
    "dbm_to_watts",
    "default_scene",
    "demo_scene",
    "demo_tracker",
    "directional_bs_beam",
    "directional_pbf",
    "directional_plan",
    "equivalent_gain",
    "estimate",
    "estimate_aod",
    "expected_steering",
    "fim_single_slot",
    "free_space_gain",
    "fused_belief",
    "gaussian_fuse",
    "generate_trajectory",
    "init_matching",
    "init_state",
    "initial_bfim",
    "likelihood_product_gaussian",
    "line_spectrum",
    "markov_predict",
    "optimize_p1_agdm",
    "optimize_p2_weights",
    "position_bcrb",
    "position_to_angle_vm",
    "predict_gains",
    "predicted_position_bound",
    "random_plan",
    "run_baseline",
    "run_experiment",
    "run_slot",
    "slot_truth",
    "steering",
    "synthesize",
    "vm_circular_moment",
    "vm_extrinsic",
    "vm_multiply",
    "watts_to_dbm",
    "wrap_angle",
    "write_csv",
    "__version__",
]
