"""Staged robust fitting of pose, shape and camera to observations.

The objective combines a Geman-McClure-robustified 2D reprojection term, a
squared-norm shape prior, and an exponential barrier on joint limits:

    E(q, beta, cam) = l_kp2d * E_kp2d + l_shape * |beta|^2 + l_pose * E_pose

with ``E_pose = sum_i exp(lower_i - q_i) + exp(q_i - upper_i)`` over the
bounded DoFs (one-sided limits contribute their existing side only,
unbounded DoFs contribute nothing).  ``fit_to_mesh`` swaps the reprojection
term for the mean squared vertex distance to a target mesh with the same
topology, which is how parameters are recovered from meshes produced by
ball-jointed models.

Gradients are analytic throughout (chain rule through skinning, forward
kinematics, joint regression, projection and the robustifier).  The descent
engine is first order with per-parameter adaptive steps and a global
acceptance rule: a step that does not strictly decrease the objective is
rejected, so the objective is non-increasing across accepted iterates by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .body_model import Mesh, ModelDefinition, forward_pipeline, backward_pipeline
from .camera import WeakPerspectiveCamera
from .losses import KeypointSet2D

PARAM_GROUPS = ("camera", "root", "pose", "shape")


class NumericalFitError(RuntimeError):
    """The objective became non-finite where a finite value is required."""


@dataclass
class Stage:
    """One optimization stage: which parameter groups move, for how long."""

    free: tuple[str, ...]
    max_iterations: int = 200
    tol: float = 1e-6  # relative objective decrease over the convergence window

    def __post_init__(self):
        self.free = tuple(self.free)
        for g in self.free:
            if g not in PARAM_GROUPS:
                raise ValueError(f"unknown parameter group {g!r}, expected one of {PARAM_GROUPS}")


@dataclass
class FitConfig:
    stages: list[Stage] = field(default_factory=lambda: [
        Stage(free=("camera", "root"), max_iterations=100),
        Stage(free=("camera", "root", "pose", "shape"), max_iterations=600),
    ])
    lambda_kp2d: float = 1.0
    lambda_shape: float = 5e-3
    lambda_pose: float = 1e-2
    sigma: float = 0.1  # robustifier scale, normalized image units
    conf_threshold: float = 0.3  # keypoints below this confidence are ignored
    step_init: float = 0.05
    step_grow: float = 1.2
    step_shrink: float = 0.5
    step_max: float = 0.5
    step_min: float = 1e-10
    convergence_window: int = 5

    def __post_init__(self):
        if not self.stages:
            raise ValueError("at least one stage required")
        if min(self.lambda_kp2d, self.lambda_shape, self.lambda_pose) < 0:
            raise ValueError("term weights must be non-negative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        doc = dict(doc)
        stages = [Stage(**{**s, "free": tuple(s["free"])}) for s in doc.pop("stages", [])]
        if stages:
            return cls(stages=stages, **doc)
        return cls(**doc)

    @classmethod
    def for_mesh(cls) -> "FitConfig":
        """Defaults for mesh-target fitting.

        The data term is a mean squared distance in squared meters, orders of
        magnitude smaller than the keypoint objective, so the priors are
        scaled down and a single all-free stage runs tighter and longer.
        """
        return cls(
            stages=[Stage(free=("root", "pose", "shape"), max_iterations=2500, tol=1e-11)],
            lambda_shape=1e-6,
            lambda_pose=1e-5,
        )


@dataclass
class FitInit:
    """Initial parameter values for a fit."""

    q: np.ndarray
    beta: np.ndarray
    camera: WeakPerspectiveCamera | None = None


@dataclass
class StageReport:
    free: tuple[str, ...]
    iterations: int
    converged: bool
    objective: float


@dataclass
class FitResult:
    q: np.ndarray
    beta: np.ndarray
    camera: WeakPerspectiveCamera | None
    objective: float
    breakdown: dict[str, float]
    converged: bool
    iterations: int
    stage_reports: list[StageReport]
    objective_trace: list[float]  # objective after every iteration, non-increasing

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "beta": self.beta.tolist(),
            "camera": None if self.camera is None else self.camera.as_array().tolist(),
            "objective": self.objective,
            "breakdown": dict(self.breakdown),
            "converged": self.converged,
            "iterations": self.iterations,
            "stages": [asdict(s) for s in self.stage_reports],
        }


# ---------------------------------------------------------------------------
# Objective terms


def geman_mcclure(r, sigma: float):
    """Bounded-influence robustifier r^2 sigma^2 / (r^2 + sigma^2)."""
    r2 = np.square(np.asarray(r, dtype=np.float64))
    return r2 * sigma**2 / (r2 + sigma**2)


def e_kp2d(
    model: ModelDefinition,
    q,
    beta,
    cam: WeakPerspectiveCamera,
    keypoints: KeypointSet2D,
    sigma: float,
    conf_threshold: float = 0.3,
) -> float:
    """Confidence-weighted robustified reprojection error of the keypoints."""
    cache = forward_pipeline(model, q, beta)
    joints = model.joint_regressor @ cache.v_posed
    if len(keypoints) != joints.shape[0]:
        raise ValueError(
            f"keypoint count {len(keypoints)} does not match regressor rows {joints.shape[0]}"
        )
    proj = cam.scale * joints[:, :2] + np.array([cam.tx, cam.ty])
    r = np.linalg.norm(proj - keypoints.points, axis=1)
    w = np.where(keypoints.confidence >= conf_threshold, keypoints.confidence, 0.0)
    return float(np.sum(w * geman_mcclure(r, sigma)))


def e_shape(beta) -> float:
    """Squared Euclidean norm shape prior."""
    beta = np.asarray(beta, dtype=np.float64)
    return float(beta @ beta)


def _pose_terms(model: ModelDefinition, q: np.ndarray):
    """Per-DoF barrier values and derivative, nan-free."""
    packed = model.packed
    lo, hi = packed.dof_lower, packed.dof_upper
    lo_term = np.where(np.isnan(lo), 0.0, np.exp(np.where(np.isnan(lo), 0.0, lo - q)))
    hi_term = np.where(np.isnan(hi), 0.0, np.exp(np.where(np.isnan(hi), 0.0, q - hi)))
    return lo_term + hi_term, hi_term - lo_term


def e_pose(model: ModelDefinition, q) -> float:
    """Exponential barrier on joint limits; unbounded DoFs contribute 0."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.pose_dim,):
        raise ValueError(f"pose vector: expected ({model.pose_dim},), got {q.shape}")
    value, _ = _pose_terms(model, q)
    return float(np.sum(value))


# ---------------------------------------------------------------------------
# Packed evaluation


def _free_mask(model: ModelDefinition, groups, n_params: int, has_camera: bool) -> np.ndarray:
    packed = model.packed
    d = model.pose_dim
    b = model.shape_dim
    mask = np.zeros(n_params, dtype=bool)
    root_lo = int(packed.dof_start[packed.root])
    root_hi = int(packed.dof_start[packed.root + 1])
    for g in groups:
        if g == "root":
            mask[root_lo:root_hi] = True
        elif g == "pose":
            mask[:d] = True
            mask[root_lo:root_hi] = False
            if "root" in groups:
                mask[root_lo:root_hi] = True
        elif g == "shape":
            mask[d : d + b] = True
        elif g == "camera":
            if has_camera:
                mask[d + b :] = True
        else:
            raise ValueError(f"unknown parameter group {g!r}")
    return mask


class _KeypointProblem:
    """Packed objective E(q, beta, cam) for 2D keypoint fitting."""

    has_camera = True

    def __init__(self, model: ModelDefinition, keypoints: KeypointSet2D, config: FitConfig):
        if len(keypoints) != model.n_keypoints:
            raise ValueError(
                f"keypoint count {len(keypoints)} does not match regressor rows "
                f"{model.n_keypoints}"
            )
        self.model = model
        self.config = config
        self.targets = keypoints.points
        self.weights = np.where(
            keypoints.confidence >= config.conf_threshold, keypoints.confidence, 0.0
        )
        self.n_params = model.pose_dim + model.shape_dim + 3

    def pack(self, q, beta, cam: WeakPerspectiveCamera) -> np.ndarray:
        return np.concatenate([q, beta, cam.as_array()])

    def unpack(self, x: np.ndarray):
        d, b = self.model.pose_dim, self.model.shape_dim
        return x[:d], x[d : d + b], x[d + b :]

    def evaluate(self, x: np.ndarray, need_grad: bool):
        model, cfg = self.model, self.config
        q, beta, cam = self.unpack(x)
        s = cam[0]
        if not s > 0 or not np.all(np.isfinite(x)):
            return np.inf, {}, None
        cache = forward_pipeline(model, q, beta)
        joints = model.joint_regressor @ cache.v_posed
        proj = s * joints[:, :2] + cam[1:]
        res = proj - self.targets
        r2 = np.sum(res**2, axis=1)
        sig2 = cfg.sigma**2
        data = float(np.sum(self.weights * r2 * sig2 / (r2 + sig2)))
        shape = float(beta @ beta)
        pose_val, pose_der = _pose_terms(model, q)
        pose = float(np.sum(pose_val))
        breakdown = {
            "kp2d": cfg.lambda_kp2d * data,
            "shape": cfg.lambda_shape * shape,
            "pose": cfg.lambda_pose * pose,
        }
        total = sum(breakdown.values())
        if not need_grad:
            return total, breakdown, None
        # d(rho)/d(res) with rho expressed in u = r^2: sigma^4 / (u + sigma^2)^2
        drho = (sig2**2 / (r2 + sig2) ** 2)[:, None] * 2.0 * res
        dres = cfg.lambda_kp2d * self.weights[:, None] * drho
        g_s = float(np.sum(dres * joints[:, :2]))
        g_t = dres.sum(axis=0)
        g_joints = np.zeros_like(joints)
        g_joints[:, :2] = s * dres
        g_vposed = self.model.joint_regressor.T @ g_joints
        gq, gbeta = backward_pipeline(model, cache, g_vposed)
        gq += cfg.lambda_pose * pose_der
        gbeta += cfg.lambda_shape * 2.0 * beta
        grad = np.concatenate([gq, gbeta, [g_s, g_t[0], g_t[1]]])
        return total, breakdown, grad

    def result_params(self, x: np.ndarray):
        q, beta, cam = self.unpack(x)
        return q.copy(), beta.copy(), WeakPerspectiveCamera.from_array(cam)


class _MeshProblem:
    """Packed objective E(q, beta) for fitting to a target mesh."""

    has_camera = False

    def __init__(self, model: ModelDefinition, target_vertices: np.ndarray, config: FitConfig):
        target_vertices = np.asarray(target_vertices, dtype=np.float64)
        if target_vertices.shape != (model.n_vertices, 3):
            raise ValueError(
                f"target vertices: expected ({model.n_vertices}, 3), "
                f"got {target_vertices.shape}"
            )
        self.model = model
        self.config = config
        self.target = target_vertices
        self.n_params = model.pose_dim + model.shape_dim

    def pack(self, q, beta, cam=None) -> np.ndarray:
        return np.concatenate([q, beta])

    def unpack(self, x: np.ndarray):
        d = self.model.pose_dim
        return x[:d], x[d:], None

    def evaluate(self, x: np.ndarray, need_grad: bool):
        model, cfg = self.model, self.config
        q, beta, _ = self.unpack(x)
        if not np.all(np.isfinite(x)):
            return np.inf, {}, None
        cache = forward_pipeline(model, q, beta)
        delta = cache.v_posed - self.target
        data = float(np.sum(delta**2) / model.n_vertices)
        shape = float(beta @ beta)
        pose_val, pose_der = _pose_terms(model, q)
        breakdown = {
            "mesh": cfg.lambda_kp2d * data,
            "shape": cfg.lambda_shape * shape,
            "pose": cfg.lambda_pose * float(np.sum(pose_val)),
        }
        total = sum(breakdown.values())
        if not need_grad:
            return total, breakdown, None
        g_vposed = cfg.lambda_kp2d * 2.0 * delta / model.n_vertices
        gq, gbeta = backward_pipeline(model, cache, g_vposed)
        gq += cfg.lambda_pose * pose_der
        gbeta += cfg.lambda_shape * 2.0 * beta
        return total, breakdown, np.concatenate([gq, gbeta])

    def result_params(self, x: np.ndarray):
        q, beta, _ = self.unpack(x)
        return q.copy(), beta.copy(), None


def total_objective(
    model: ModelDefinition,
    q,
    beta,
    cam: WeakPerspectiveCamera,
    keypoints: KeypointSet2D,
    config: FitConfig,
):
    """Weighted objective value and its per-term breakdown."""
    problem = _KeypointProblem(model, keypoints, config)
    total, breakdown, _ = problem.evaluate(
        problem.pack(np.asarray(q, dtype=np.float64), np.asarray(beta, dtype=np.float64), cam),
        need_grad=False,
    )
    return total, breakdown


def objective_gradient(
    model: ModelDefinition,
    q,
    beta,
    cam: WeakPerspectiveCamera,
    keypoints: KeypointSet2D,
    config: FitConfig,
    free=PARAM_GROUPS,
) -> np.ndarray:
    """Analytic gradient of the total objective over [q, beta, camera].

    Parameters outside the ``free`` groups get exactly zero entries.
    """
    problem = _KeypointProblem(model, keypoints, config)
    x = problem.pack(np.asarray(q, dtype=np.float64), np.asarray(beta, dtype=np.float64), cam)
    total, _, grad = problem.evaluate(x, need_grad=True)
    if not np.isfinite(total):
        raise ValueError("objective is not finite at the evaluation point")
    mask = _free_mask(model, free, problem.n_params, has_camera=True)
    return np.where(mask, grad, 0.0)


# ---------------------------------------------------------------------------
# Descent engine


def _descend_stage(problem, x, stage: Stage, config: FitConfig):
    """Monotone adaptive-step descent over one stage's free parameters.

    Returns ``(x, f, breakdown, iterations, converged, trace)``.
    """
    mask = _free_mask(problem.model, stage.free, problem.n_params, problem.has_camera)
    f, breakdown, grad = problem.evaluate(x, need_grad=True)
    if not np.isfinite(f):
        raise NumericalFitError("objective is not finite at the stage start")
    steps = np.full(problem.n_params, config.step_init)
    prev_sign = np.zeros(problem.n_params)
    trace = [f]
    window = config.convergence_window
    accept_history: list[bool] = []
    converged = False
    it = 0
    while it < stage.max_iterations:
        it += 1
        g = np.where(mask, grad, 0.0)
        if np.max(np.abs(g)) < 1e-14:
            converged = True
            break
        sign = np.sign(g)
        agree = sign * prev_sign
        steps = np.where(agree > 0, steps * config.step_grow, steps)
        steps = np.where(agree < 0, steps * config.step_shrink, steps)
        steps = np.clip(steps, config.step_min, config.step_max)
        trial = x - sign * steps
        f_trial, bd_trial, _ = problem.evaluate(trial, need_grad=False)
        if np.isfinite(f_trial) and f_trial < f:
            x, f, breakdown = trial, f_trial, bd_trial
            prev_sign = sign
            _, _, grad = problem.evaluate(x, need_grad=True)
            accept_history.append(True)
        else:
            steps = steps * config.step_shrink
            prev_sign = np.zeros(problem.n_params)
            accept_history.append(False)
        trace.append(f)
        if len(trace) > window:
            # a window of pure rejections only counts as convergence once the
            # step sizes have collapsed, otherwise a burst of oversized trial
            # steps would read as a plateau
            flat = trace[-window - 1] - trace[-1] < stage.tol * max(1.0, abs(trace[-window - 1]))
            settled = any(accept_history[-window:]) or float(np.max(steps[mask])) <= 1e-7
            if flat and settled:
                converged = True
                break
    return x, f, breakdown, it, converged, trace


def _run_fit(problem, init: FitInit, config: FitConfig) -> FitResult:
    q0 = np.asarray(init.q, dtype=np.float64)
    beta0 = np.asarray(init.beta, dtype=np.float64)
    if q0.shape != (problem.model.pose_dim,):
        raise ValueError(f"init.q: expected ({problem.model.pose_dim},), got {q0.shape}")
    if beta0.shape != (problem.model.shape_dim,):
        raise ValueError(f"init.beta: expected ({problem.model.shape_dim},), got {beta0.shape}")
    x = problem.pack(q0, beta0, init.camera)
    f0, _, _ = problem.evaluate(x, need_grad=False)
    if not np.isfinite(f0):
        raise NumericalFitError("objective is not finite at the initial parameters")
    stage_reports = []
    full_trace: list[float] = []
    total_iters = 0
    f, breakdown = f0, {}
    for stage in config.stages:
        x, f, breakdown, iters, converged, trace = _descend_stage(problem, x, stage, config)
        total_iters += iters
        stage_reports.append(
            StageReport(free=stage.free, iterations=iters, converged=converged, objective=f)
        )
        full_trace.extend(trace if not full_trace else trace[1:])
    q, beta, cam = problem.result_params(x)
    return FitResult(
        q=q,
        beta=beta,
        camera=cam,
        objective=float(sum(breakdown.values())),
        breakdown=breakdown,
        converged=all(s.converged for s in stage_reports),
        iterations=total_iters,
        stage_reports=stage_reports,
        objective_trace=full_trace,
    )


def fit(
    model: ModelDefinition,
    keypoints: KeypointSet2D,
    init: FitInit,
    config: FitConfig | None = None,
) -> FitResult:
    """Fit pose, shape and camera to observed 2D keypoints."""
    config = config or FitConfig()
    if init.camera is None:
        raise ValueError("keypoint fitting requires an initial camera")
    return _run_fit(_KeypointProblem(model, keypoints, config), init, config)


def fit_to_mesh(
    model: ModelDefinition,
    target: Mesh | np.ndarray,
    init: FitInit,
    config: FitConfig | None = None,
) -> FitResult:
    """Fit pose and shape so the skinned mesh matches a same-topology target."""
    config = config or FitConfig.for_mesh()
    vertices = target.vertices if isinstance(target, Mesh) else target
    return _run_fit(_MeshProblem(model, vertices, config), init, config)
