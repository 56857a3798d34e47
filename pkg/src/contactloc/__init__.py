"""Multi-contact localization and force identification for serial arms.

Estimates where and how hard a fixed-base serial robot is being touched,
using only joint torque sensing and a base force/torque sensor: a momentum
observer and a nominal-dynamics subtraction turn the raw channels into a
stacked measurement vector, and a particle filter over preprocessed link
meshes localizes up to one contact per link while a constrained least-squares
fit identifies the forces.
"""

from .errors import ContactLocError, FormatError, InputError, SolverFailure, ValidationError
from .kinematics import (
    BaseWrench,
    ChainModel,
    JointState,
    LinkFrames,
    RevoluteJoint,
    bias_vector,
    forward_kinematics,
    gravity_vector,
    load_chain,
    mass_matrix,
    parse_chain,
    point_jacobian,
    rnea,
)
from .sensing import (
    MeasurementVector,
    ObserverState,
    SensorFrame,
    estimate_base_wrench,
    observer_step,
    read_frames_csv,
    stack_measurement,
    write_frames_csv,
)
from .mesh import (
    LinkSurface,
    NeighborTable,
    Particle,
    build_neighbor_table,
    load_face_mask,
    load_neighbor_table,
    load_surface,
    particle_to_world,
    random_particle,
    save_neighbor_table,
)
from .contactmodel import (
    ContactSystem,
    ForceSolution,
    FrictionConeBasis,
    assemble_contact_system,
    cone_basis,
    solve_force_qp,
)
from .filter import (
    ContactEstimate,
    FilterConfig,
    FilterState,
    ParticleSet,
    extract_estimate,
    filter_step,
    load_filter_config,
    manage_particle_sets,
    measurement_update,
    motion_model,
    resample_with_explorers,
    update_exploration_particles,
)
from .harness import (
    ChainAssets,
    GroundTruthContact,
    NoiseModel,
    Scenario,
    Trajectory,
    TrialMetrics,
    build_assets,
    default_assets,
    default_chain,
    load_scenario,
    random_scenario,
    run_benchmark,
    run_trial,
    synthesize_measurements,
)

__version__ = "0.1.0"
