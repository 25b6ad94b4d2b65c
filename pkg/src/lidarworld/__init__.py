"""Non-neural core of a JEPA-style LiDAR world model: sequence transformation,
ray-cast occupancy labels, group BEV masking, loss kernels, and a synthetic
scene generator for oracle-based verification."""

from .core import (
    BEVMask,
    BevSpec,
    CellKind,
    DEFAULT_GRID,
    FREE,
    Frame,
    GridSpec,
    INVALID,
    InstanceBox,
    OCCUPIED,
    OccupancyGrid,
    PointCloud,
    Pose,
    RigidTransform,
    Sequence,
    ValidationError,
)
from .geometry import (
    apply_pose,
    compose,
    invert_pose,
    points_in_box,
    relative_pose,
    svd_align,
)
from .losses import (
    EmbeddingBatch,
    LossConfig,
    cosine_prediction_loss,
    ema_update,
    iou_metrics,
    l2_prediction_loss,
    masked_bce,
    sigreg,
    total_loss,
    variance_reg,
)
from .masking import MaskConfig, MaskedFrameSet, mask_window
from .pipeline import run_mask_prep, run_ocf_prep
from .raycast import (
    OcfSample,
    build_inputs,
    build_labels,
    build_ocf_sample,
    raycast,
    raycast_oracle,
    voxelize_points,
)
from .scene_io import SceneIOError
from .sequence_transform import TransformedSequence, transform_sequence
from .synth import (
    EgoTrajectory,
    LidarConfig,
    ObjectSpec,
    SceneConfig,
    analytic_occupancy,
    generate,
    write_scene,
)

__version__ = "0.1.0"
