"""dynid: manipulator generation, simulation, and dynamic-parameter regression.

The pipeline procedurally generates serial manipulators with varied inertial
and frictional properties, simulates PID-driven waypoint trajectories at
1 kHz with a gravity-aware proportional term, builds decimated and
offset-sampled sequence datasets enriched with Jacobian features, and trains
a transformer encoder to regress the normalized dynamic parameters,
reporting per-parameter R2 and RMSE.
"""

from .control import (PidGains, Status, TrajectoryLog, Waypoint, detect_failure,
                      gravity_aware_pid, sample_waypoints, simulate_trajectory)
from .dataset import (Dataset, DatasetConfig, FeatureMask, SequenceSample, build_dataset,
                      effective_time, enrich_features, normalize_targets, offset_sample,
                      prune_constant_features, utilization)
from .dynamics import (DynTerms, JointState, LinkPose, forward_dynamics, forward_kinematics,
                       friction_torque, inverse_dynamics, jacobian, mass_matrix, step)
from .errors import DynidError
from .estimator import (EncoderConfig, EncoderModel, Metrics, TrainConfig, evaluate,
                        positional_encoding, train)
from .model_gen import (DEFAULT_TEMPLATE, JointSpec, KinematicTemplate, LinkSpec, RobotModel,
                        VariationRanges, compute_link_inertia, generate_robot, param_vector,
                        parse_urdf, serialize_urdf)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
