"""Pseudo-ground-truth cloth meshes from action-conditioned, model-based tracking."""

__version__ = "0.1.0"

from .dynamics import SimParams, dyn_step, explosion_check, simulate_segment
from .mesh import (
    ClothMesh,
    ClothState,
    LowLevelAction,
    PickPlaceAction,
    Segment,
    Trajectory,
    build_grid_cloth,
    nearest_vertex,
)
from .optimize import CorrectionField, TtoConfig, rigidity_loss, run_tto, tto_objective
from .sensing import (
    CameraModel,
    PointCloud,
    SphereOccluder,
    chamfer_bidirectional,
    chamfer_one_way,
    render_point_cloud,
    visible_vertices,
)
from .tracker import (
    CalibrationGrid,
    TrackerConfig,
    calibrate,
    collision_count,
    generate_pseudo_dataset,
    line_search_step,
    track_segment,
)
