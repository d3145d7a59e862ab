"""Constrained-skeleton body model, keypoint fitting, label refinement and
pose evaluation metrics, with a compiled kernel core and a pure NumPy
fallback (see ``skelfit.kernels.BACKEND`` for the active one)."""

from .body_model import (
    DoF,
    FKResult,
    Joint,
    Mesh,
    ModelDefinition,
    ModelValidationError,
    clamp_to_limits,
    forward_kinematics,
    load_model,
    make_toy_model,
    regress_joints,
    save_model,
    shape_mesh,
    skin_mesh,
)
from .camera import WeakPerspectiveCamera, project
from .kernels import BACKEND
from .losses import KeypointSet2D, loss_kp2d, loss_kp3d, loss_pose, loss_shape
from .metrics import (
    SimilarityTransform,
    ViolationTable,
    decompose_against_limits,
    mpjpe,
    mpvpe,
    pa_mpjpe,
    pa_mpvpe,
    pck,
    procrustes_align,
    violation_audit,
)
from .refine import (
    DatasetFormatError,
    DatasetRecord,
    ParamEstimate,
    RefinementReport,
    load_dataset,
    refine_batch,
    save_dataset,
)
from .rotations import cont6d_to_rotmat, dof_rotation, euler_to_rotmat, rotmat_to_euler
from .skelify import (
    FitConfig,
    FitInit,
    FitResult,
    NumericalFitError,
    Stage,
    e_kp2d,
    e_pose,
    e_shape,
    fit,
    fit_to_mesh,
    geman_mcclure,
    objective_gradient,
    total_objective,
)

__version__ = "0.1.0"
