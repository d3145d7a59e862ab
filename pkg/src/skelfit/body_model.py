"""Parametric body model with a constrained kinematic tree.

A model maps a pose vector ``q`` (one entry per degree of freedom, radians
for rotations, meters for translations) and a shape vector ``beta``
(blendshape coefficients) to a skinned surface mesh and 3D joint locations.
Every DoF is a single axis rotation or translation with optional lower/upper
limits, so joint angle constraints are explicit model data rather than a
post-processing concern.

Model files are JSON documents (``format: skelfit-model, version: 1``); see
``load_model`` and the README for the schema.  Offsets are in meters and
limits in radians.  ``make_toy_model`` builds a small self-consistent biped
used throughout the test suite, so the real (licensed) model assets are
never required.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

MODEL_FORMAT = "skelfit-model"
MODEL_VERSION = 1

ROTATION = "rotation"
TRANSLATION = "translation"


class ModelValidationError(ValueError):
    """A model document violates the schema or a structural invariant."""


@dataclass
class DoF:
    name: str
    kind: str  # "rotation" or "translation"
    axis: np.ndarray  # (3,) unit vector
    lower: float | None = None  # None means unbounded on that side
    upper: float | None = None


@dataclass
class Joint:
    name: str
    parent: int  # -1 for the root
    rest_offset: np.ndarray  # (3,) offset from parent at beta = 0
    dofs: list[DoF] = field(default_factory=list)


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int


@dataclass
class FKResult:
    """World transforms from forward kinematics."""

    rotations: np.ndarray  # (J, 3, 3)
    positions: np.ndarray  # (J, 3) joint origins, i.e. the posed skeleton

    def transforms(self) -> np.ndarray:
        """Homogeneous (J, 4, 4) world transforms."""
        n = self.rotations.shape[0]
        out = np.tile(np.eye(4), (n, 1, 1))
        out[:, :3, :3] = self.rotations
        out[:, :3, 3] = self.positions
        return out


@dataclass
class PackedModel:
    """Flat array view of the kinematic structure consumed by the kernels."""

    parents: np.ndarray  # (J,) int32
    order: np.ndarray  # (J,) int32, topological
    root: int
    dof_axis: np.ndarray  # (D, 3) normalized
    dof_kind: np.ndarray  # (D,) int8: 0 rotation, 1 translation
    dof_lower: np.ndarray  # (D,) float, nan when unbounded
    dof_upper: np.ndarray  # (D,)
    dof_joint: np.ndarray  # (D,) int32 owning joint
    dof_start: np.ndarray  # (J+1,) int32 CSR offsets into q
    dof_names: list[str]


@dataclass
class ModelDefinition:
    """Immutable-by-convention container for all model data.

    ``joint_location_regressor`` (J x N, row-stochastic), when present, ties
    rest joint locations to the shaped mesh so that shape changes move the
    skeleton consistently with the surface.  Without it the rest offsets are
    fixed.  ``pose_blendshapes`` is reserved in the file schema but not
    evaluated.
    """

    joints: list[Joint]
    template_vertices: np.ndarray  # (N, 3)
    shape_blendshapes: np.ndarray  # (N, 3, B)
    skinning_weights: np.ndarray  # (N, J) rows sum to 1, non-negative
    joint_regressor: np.ndarray  # (K, N) rows sum to 1
    faces: np.ndarray  # (F, 3) int
    joint_location_regressor: np.ndarray | None = None  # (J, N)
    keypoint_names: list[str] | None = None

    def __post_init__(self):
        self._packed: PackedModel | None = None

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def pose_dim(self) -> int:
        return sum(len(j.dofs) for j in self.joints)

    @property
    def shape_dim(self) -> int:
        return self.shape_blendshapes.shape[2]

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def packed(self) -> PackedModel:
        if self._packed is None:
            self._packed = _pack(self)
        return self._packed

    def validate(self) -> "ModelDefinition":
        validate_model(self)
        return self

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(f"no joint named {name!r}")

    def dof_slice(self, joint: int | str) -> slice:
        """Slice of the pose vector holding the given joint's DoFs."""
        if isinstance(joint, str):
            joint = self.joint_index(joint)
        p = self.packed
        return slice(int(p.dof_start[joint]), int(p.dof_start[joint + 1]))


def _topological_order(parents: np.ndarray) -> np.ndarray:
    """Kahn's algorithm; raises ModelValidationError on cycles/bad roots."""
    n = len(parents)
    roots = [j for j in range(n) if parents[j] < 0]
    if len(roots) != 1:
        raise ModelValidationError(
            f"joints: expected exactly one root (parent -1), found {len(roots)}"
        )
    children: list[list[int]] = [[] for _ in range(n)]
    for j, p in enumerate(parents):
        if p >= n or (p >= 0 and p == j):
            raise ModelValidationError(f"joints[{j}].parent: invalid index {p}")
        if p >= 0:
            children[p].append(j)
    order = []
    stack = [roots[0]]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        unreached = sorted(set(range(n)) - set(order))
        raise ModelValidationError(
            f"joints: cycle detected, unreachable from root: indices {unreached}"
        )
    return np.asarray(order, dtype=np.int32)


def _pack(model: ModelDefinition) -> PackedModel:
    parents = np.asarray([j.parent for j in model.joints], dtype=np.int32)
    order = _topological_order(parents)
    root = int(order[0])
    axes, kinds, lowers, uppers, owners, names = [], [], [], [], [], []
    starts = [0]
    for ji, joint in enumerate(model.joints):
        for dof in joint.dofs:
            a = np.asarray(dof.axis, dtype=np.float64)
            axes.append(a / np.linalg.norm(a))
            kinds.append(0 if dof.kind == ROTATION else 1)
            lowers.append(np.nan if dof.lower is None else float(dof.lower))
            uppers.append(np.nan if dof.upper is None else float(dof.upper))
            owners.append(ji)
            names.append(dof.name)
        starts.append(starts[-1] + len(joint.dofs))
    return PackedModel(
        parents=parents,
        order=order,
        root=root,
        dof_axis=np.asarray(axes, dtype=np.float64).reshape(-1, 3),
        dof_kind=np.asarray(kinds, dtype=np.int8),
        dof_lower=np.asarray(lowers, dtype=np.float64),
        dof_upper=np.asarray(uppers, dtype=np.float64),
        dof_joint=np.asarray(owners, dtype=np.int32),
        dof_start=np.asarray(starts, dtype=np.int32),
        dof_names=names,
    )


def validate_model(model: ModelDefinition, tol: float = 1e-6) -> None:
    """Check every structural invariant, reporting the offending field."""
    n = model.n_vertices
    nj = model.n_joints
    if model.template_vertices.ndim != 2 or model.template_vertices.shape[1] != 3:
        raise ModelValidationError(
            f"template_vertices: expected (N, 3), got {model.template_vertices.shape}"
        )
    if model.shape_blendshapes.shape[:2] != (n, 3) or model.shape_blendshapes.ndim != 3:
        raise ModelValidationError(
            f"shape_blendshapes: expected ({n}, 3, B), got {model.shape_blendshapes.shape}"
        )
    if model.skinning_weights.shape != (n, nj):
        raise ModelValidationError(
            f"skinning_weights: expected ({n}, {nj}), got {model.skinning_weights.shape}"
        )
    if np.any(model.skinning_weights < 0):
        rows = np.unique(np.nonzero(model.skinning_weights < 0)[0])
        raise ModelValidationError(f"skinning_weights: negative entries in rows {rows.tolist()}")
    sums = model.skinning_weights.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
    if bad.size:
        raise ModelValidationError(
            f"skinning_weights: rows {bad.tolist()} sum to {sums[bad].tolist()}, expected 1"
        )
    if model.joint_regressor.ndim != 2 or model.joint_regressor.shape[1] != n:
        raise ModelValidationError(
            f"joint_regressor: expected (K, {n}), got {model.joint_regressor.shape}"
        )
    sums = model.joint_regressor.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
    if bad.size:
        raise ModelValidationError(
            f"joint_regressor: rows {bad.tolist()} sum to {sums[bad].tolist()}, expected 1"
        )
    if model.joint_location_regressor is not None:
        jl = model.joint_location_regressor
        if jl.shape != (nj, n):
            raise ModelValidationError(
                f"joint_location_regressor: expected ({nj}, {n}), got {jl.shape}"
            )
        sums = jl.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
        if bad.size:
            raise ModelValidationError(
                f"joint_location_regressor: rows {bad.tolist()} sum to "
                f"{sums[bad].tolist()}, expected 1"
            )
    if model.faces.size and (model.faces.min() < 0 or model.faces.max() >= n):
        raise ModelValidationError("faces: vertex index out of range")
    for ji, joint in enumerate(model.joints):
        off = np.asarray(joint.rest_offset, dtype=np.float64)
        if off.shape != (3,) or not np.all(np.isfinite(off)):
            raise ModelValidationError(f"joints[{ji}].rest_offset: expected finite 3-vector")
        for di, dof in enumerate(joint.dofs):
            where = f"joints[{ji}].dofs[{di}]"
            if dof.kind not in (ROTATION, TRANSLATION):
                raise ModelValidationError(f"{where}.kind: {dof.kind!r}")
            a = np.asarray(dof.axis, dtype=np.float64)
            if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > tol:
                raise ModelValidationError(f"{where}.axis: must be a unit 3-vector, got {a}")
            if dof.lower is not None and dof.upper is not None and not dof.lower < dof.upper:
                raise ModelValidationError(
                    f"{where}: lower limit {dof.lower} must be < upper limit {dof.upper}"
                )
    # Raises on cycles / multiple roots.
    packed = model.packed
    if model.joint_location_regressor is not None:
        rest = model.joint_location_regressor @ model.template_vertices
        for j in range(nj):
            p = packed.parents[j]
            expect = rest[j] - (rest[p] if p >= 0 else 0.0)
            if np.max(np.abs(expect - np.asarray(model.joints[j].rest_offset))) > 10 * tol:
                raise ModelValidationError(
                    f"joints[{j}].rest_offset: inconsistent with joint_location_regressor"
                )


# ---------------------------------------------------------------------------
# File I/O


def _model_from_dict(doc: dict) -> ModelDefinition:
    if doc.get("format") != MODEL_FORMAT:
        raise ModelValidationError(f"format: expected {MODEL_FORMAT!r}, got {doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise ModelValidationError(f"version: expected {MODEL_VERSION}, got {doc.get('version')!r}")
    if doc.get("pose_blendshapes") not in (None, []):
        raise ModelValidationError(
            "pose_blendshapes: present but not supported by this format version"
        )
    try:
        joints = [
            Joint(
                name=j["name"],
                parent=int(j["parent"]),
                rest_offset=np.asarray(j["rest_offset"], dtype=np.float64),
                dofs=[
                    DoF(
                        name=d.get("name", f"{j['name']}.dof{di}"),
                        kind=d["kind"],
                        axis=np.asarray(d["axis"], dtype=np.float64),
                        lower=d.get("lower"),
                        upper=d.get("upper"),
                    )
                    for di, d in enumerate(j.get("dofs", []))
                ],
            )
            for j in doc["joints"]
        ]
        jl = doc.get("joint_location_regressor")
        model = ModelDefinition(
            joints=joints,
            template_vertices=np.asarray(doc["template_vertices"], dtype=np.float64),
            shape_blendshapes=np.asarray(doc["shape_blendshapes"], dtype=np.float64),
            skinning_weights=np.asarray(doc["skinning_weights"], dtype=np.float64),
            joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
            faces=np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3),
            joint_location_regressor=None if jl is None else np.asarray(jl, dtype=np.float64),
            keypoint_names=doc.get("keypoint_names"),
        )
    except (KeyError, TypeError) as exc:
        raise ModelValidationError(f"malformed model document: missing/invalid field {exc}") from exc
    model.validate()
    return model


def load_model(source: str | Path | dict) -> ModelDefinition:
    """Load and validate a model definition from a JSON file or dict."""
    if isinstance(source, dict):
        return _model_from_dict(source)
    with open(source) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelValidationError(f"{source}: not valid JSON: {exc}") from exc
    return _model_from_dict(doc)


def model_to_dict(model: ModelDefinition) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "units": {"length": "m", "angle": "rad"},
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "rest_offset": np.asarray(j.rest_offset).tolist(),
                "dofs": [
                    {
                        "name": d.name,
                        "kind": d.kind,
                        "axis": np.asarray(d.axis).tolist(),
                        "lower": d.lower,
                        "upper": d.upper,
                    }
                    for d in j.dofs
                ],
            }
            for j in model.joints
        ],
        "template_vertices": model.template_vertices.tolist(),
        "shape_blendshapes": model.shape_blendshapes.tolist(),
        "skinning_weights": model.skinning_weights.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "joint_location_regressor": (
            None
            if model.joint_location_regressor is None
            else model.joint_location_regressor.tolist()
        ),
        "keypoint_names": model.keypoint_names,
        "faces": model.faces.tolist(),
        "pose_blendshapes": None,
    }


def save_model(model: ModelDefinition, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Toy model

_RING = 4  # vertices per ring cross-section


def _ring_points(center, axis, radius, phase):
    axis = axis / np.linalg.norm(axis)
    # deterministic perpendicular basis
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n1 = np.cross(axis, helper)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(axis, n1)
    ang = phase + 2.0 * np.pi * np.arange(_RING) / _RING
    return center + radius * (np.cos(ang)[:, None] * n1 + np.sin(ang)[:, None] * n2)


def make_toy_model(joint_count: int = 13, verts_per_bone: int = 8) -> ModelDefinition:
    """Deterministic desk-scale biped for tests and experiments.

    13 base joints (pelvis root with free translation+rotation, 3-DoF spine,
    hips and shoulders, 2-DoF head, 1-DoF knees/elbows/ankles); knees and
    elbows carry the anatomical flexion limits [0, 3pi/4].  ``joint_count``
    beyond 13 appends extra 1-DoF links above the head; ``verts_per_bone``
    is rounded down to a multiple of 4 (ring cross-sections), minimum 8.

    The same arguments always produce the identical model.
    """
    if joint_count < 13:
        raise ValueError("joint_count must be >= 13 (base biped topology)")
    n_rings = max(2, verts_per_bone // _RING)

    flex_max = 3.0 * np.pi / 4.0  # 135 degrees
    free = (None, None)
    spec: list[tuple[str, str | None, tuple, list]] = [
        # name, parent name, rest position, dofs as (label, kind, axis, lo, hi)
        ("pelvis", None, (0.0, 1.00, 0.0), [
            ("tx", TRANSLATION, (1, 0, 0), *free),
            ("ty", TRANSLATION, (0, 1, 0), *free),
            ("tz", TRANSLATION, (0, 0, 1), *free),
            ("rx", ROTATION, (1, 0, 0), *free),
            ("ry", ROTATION, (0, 1, 0), *free),
            ("rz", ROTATION, (0, 0, 1), *free),
        ]),
        ("spine", "pelvis", (0.0, 1.25, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -0.8, 0.8),
            ("ry", ROTATION, (0, 1, 0), -0.8, 0.8),
            ("rz", ROTATION, (0, 0, 1), -0.8, 0.8),
        ]),
        ("head", "spine", (0.0, 1.55, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -1.0, 1.0),
            ("rz", ROTATION, (0, 0, 1), -0.8, 0.8),
        ]),
        ("l_hip", "pelvis", (0.12, 0.95, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -2.0, 0.6),
            ("ry", ROTATION, (0, 1, 0), -0.8, 0.8),
            ("rz", ROTATION, (0, 0, 1), -0.6, 1.0),
        ]),
        ("l_knee", "l_hip", (0.14, 0.52, 0.0), [
            ("rx", ROTATION, (1, 0, 0), 0.0, flex_max),
        ]),
        ("l_ankle", "l_knee", (0.15, 0.10, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -0.7, 0.7),
        ]),
        ("r_hip", "pelvis", (-0.12, 0.95, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -2.0, 0.6),
            ("ry", ROTATION, (0, 1, 0), -0.8, 0.8),
            ("rz", ROTATION, (0, 0, 1), -1.0, 0.6),
        ]),
        ("r_knee", "r_hip", (-0.14, 0.52, 0.0), [
            ("rx", ROTATION, (1, 0, 0), 0.0, flex_max),
        ]),
        ("r_ankle", "r_knee", (-0.15, 0.10, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -0.7, 0.7),
        ]),
        ("l_shoulder", "spine", (0.20, 1.45, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -1.5, 1.5),
            ("ry", ROTATION, (0, 1, 0), -1.2, 1.2),
            ("rz", ROTATION, (0, 0, 1), -1.3, 1.3),
        ]),
        ("l_elbow", "l_shoulder", (0.48, 1.43, 0.0), [
            ("rz", ROTATION, (0, 0, 1), 0.0, flex_max),
        ]),
        ("r_shoulder", "spine", (-0.20, 1.45, 0.0), [
            ("rx", ROTATION, (1, 0, 0), -1.5, 1.5),
            ("ry", ROTATION, (0, 1, 0), -1.2, 1.2),
            ("rz", ROTATION, (0, 0, 1), -1.3, 1.3),
        ]),
        ("r_elbow", "r_shoulder", (-0.48, 1.43, 0.0), [
            ("rz", ROTATION, (0, 0, 1), 0.0, flex_max),
        ]),
    ]
    # extra chain links above the head for joint_count > 13
    prev = "head"
    for k in range(joint_count - 13):
        name = f"link{k}"
        base_y = 1.55 + 0.08 * (k + 1)
        spec.append((name, prev, (0.0, base_y, 0.0), [("ry", ROTATION, (0, 1, 0), -0.5, 0.5)]))
        prev = name

    names = [s[0] for s in spec]
    index = {n: i for i, n in enumerate(names)}
    positions = np.array([s[2] for s in spec], dtype=np.float64)
    parents = np.array([-1 if s[1] is None else index[s[1]] for s in spec], dtype=np.int64)
    nj = len(spec)

    # leaf extension tips give end joints skinned geometry
    tips = {"head": (0.0, 0.18, 0.0), "l_ankle": (0.0, -0.04, 0.15), "r_ankle": (0.0, -0.04, 0.15),
            "l_elbow": (0.24, 0.0, -0.02), "r_elbow": (-0.24, 0.0, -0.02)}
    if joint_count > 13:
        del tips["head"]
        tips[names[-1]] = (0.0, 0.12, 0.0)

    radius = {"pelvis": 0.11, "spine": 0.09, "head": 0.07}

    def seg_radius(name: str) -> float:
        return radius.get(name, 0.045 if "elbow" in name or "shoulder" in name else 0.055)

    # segments: (skin joint, blend joint or -1, start, end)
    segments: list[tuple[int, int, np.ndarray, np.ndarray, float]] = []
    # pelvis blob, symmetric about the root so its vertex mean is exact
    segments.append((0, -1, positions[0] - (0, 0.06, 0), positions[0] + (0, 0.06, 0), radius["pelvis"]))
    first_child_seg: dict[int, int] = {}
    for j in range(1, nj):
        p = int(parents[j])
        seg = (p, j, positions[p], positions[j], seg_radius(names[j]))
        segments.append(seg)
        first_child_seg.setdefault(p, len(segments) - 1)
    for name, tip in tips.items():
        j = index[name]
        seg = (j, -1, positions[j], positions[j] + np.asarray(tip), seg_radius(name))
        segments.append(seg)
        first_child_seg.setdefault(j, len(segments) - 1)

    verts: list[np.ndarray] = []
    weights_rows: list[tuple[int, dict[int, float]]] = []  # (vertex, {joint: w})
    faces: list[tuple[int, int, int]] = []
    seg_ring0: dict[int, list[int]] = {}  # segment -> vertex ids of its t=0 ring
    seg_all: dict[int, list[int]] = {}
    for si, (skin_j, blend_j, a, b, rad) in enumerate(segments):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        axis = b - a
        phase = 0.37 * si
        ring_ids: list[list[int]] = []
        for ri, t in enumerate(np.linspace(0.0, 1.0, n_rings)):
            pts = _ring_points(a + t * (b - a), axis, rad, phase)
            ids = []
            for p in pts:
                ids.append(len(verts))
                verts.append(p)
            ring_ids.append(ids)
            if ri == n_rings - 1 and blend_j >= 0:
                w = {skin_j: 0.5, blend_j: 0.5}
            else:
                w = {skin_j: 1.0}
            for vid in ids:
                weights_rows.append((vid, w))
        seg_ring0[si] = ring_ids[0]
        seg_all[si] = [v for ring in ring_ids for v in ring]
        for r0, r1 in zip(ring_ids, ring_ids[1:]):
            for m in range(_RING):
                m2 = (m + 1) % _RING
                faces.append((r0[m], r0[m2], r1[m2]))
                faces.append((r0[m], r1[m2], r1[m]))

    template = np.asarray(verts)
    n = len(verts)
    weights = np.zeros((n, nj))
    for vid, w in weights_rows:
        for j, val in w.items():
            weights[vid, j] = val

    # joint location regressor: uniform over a vertex set whose mean is the
    # joint center exactly (rings are symmetric around their centers)
    jloc = np.zeros((nj, n))
    for j in range(nj):
        if j == 0:
            ids = seg_all[0]  # whole pelvis blob, symmetric about the root
        else:
            ids = seg_ring0[first_child_seg[j]]
        jloc[j, ids] = 1.0 / len(ids)

    # shape blendshapes: stature, girth, arm span, lean
    y = template[:, 1]
    x = template[:, 0]
    z = template[:, 2]
    blend = np.zeros((n, 3, 4))
    blend[:, 1, 0] = 0.06 * (y - 1.0)
    blend[:, 0, 1] = 0.05 * x
    blend[:, 2, 1] = 0.05 * z
    blend[:, 0, 2] = 0.04 * x * np.clip((y - 1.1) / 0.5, 0.0, 1.0)
    blend[:, 2, 3] = 0.03 * (y - 0.1)

    rest = jloc @ template
    joints = []
    for j, (name, parent_name, _, dof_spec) in enumerate(spec):
        p = int(parents[j])
        offset = rest[j] - (rest[p] if p >= 0 else 0.0)
        dofs = [
            DoF(
                name=f"{name}.{label}",
                kind=kind,
                axis=np.asarray(axis, dtype=np.float64),
                lower=lo,
                upper=hi,
            )
            for label, kind, axis, lo, hi in dof_spec
        ]
        joints.append(Joint(name=name, parent=p, rest_offset=offset, dofs=dofs))

    model = ModelDefinition(
        joints=joints,
        template_vertices=template,
        shape_blendshapes=blend,
        skinning_weights=weights,
        joint_regressor=jloc.copy(),
        faces=np.asarray(faces, dtype=np.int64),
        joint_location_regressor=jloc,
        keypoint_names=list(names),
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Evaluation


def _check_pose(model: ModelDefinition, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.pose_dim,):
        raise ValueError(f"pose vector: expected ({model.pose_dim},), got {q.shape}")
    return q


def _check_shape(model: ModelDefinition, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (model.shape_dim,):
        raise ValueError(f"shape vector: expected ({model.shape_dim},), got {beta.shape}")
    return beta


def shape_mesh(model: ModelDefinition, beta) -> Mesh:
    """Rest-pose mesh: template plus the linear blendshape offsets."""
    beta = _check_shape(model, beta)
    v = model.template_vertices + model.shape_blendshapes @ beta
    return Mesh(vertices=v, faces=model.faces)


def rest_joint_locations(model: ModelDefinition, beta) -> np.ndarray:
    """Rest joint positions for the given shape."""
    if model.joint_location_regressor is not None:
        return model.joint_location_regressor @ shape_mesh(model, beta).vertices
    packed = model.packed
    rest = np.zeros((model.n_joints, 3))
    for j in packed.order:
        p = packed.parents[j]
        off = np.asarray(model.joints[j].rest_offset, dtype=np.float64)
        rest[j] = off if p < 0 else rest[p] + off
    return rest


@dataclass
class ForwardCache:
    """All intermediates of one model evaluation, for reuse in gradients."""

    q: np.ndarray
    beta: np.ndarray
    v_shaped: np.ndarray
    rest_joints: np.ndarray
    offsets: np.ndarray
    A: np.ndarray
    tloc: np.ndarray
    prefix: np.ndarray
    suffix: np.ndarray
    Rw: np.ndarray
    drift: np.ndarray  # world joint position minus rest position
    v_posed: np.ndarray

    @property
    def joints(self) -> np.ndarray:
        """Posed world joint positions."""
        return self.rest_joints + self.drift


def forward_pipeline(model: ModelDefinition, q, beta) -> ForwardCache:
    """Full differentiable forward pass: shape, FK, skinning."""
    q = _check_pose(model, q)
    beta = _check_shape(model, beta)
    packed = model.packed
    v_shaped = model.template_vertices + model.shape_blendshapes @ beta
    if model.joint_location_regressor is not None:
        rest = model.joint_location_regressor @ v_shaped
        offsets = rest - np.where(
            (packed.parents >= 0)[:, None], rest[packed.parents], 0.0
        )
    else:
        offsets = np.asarray([j.rest_offset for j in model.joints], dtype=np.float64)
        rest = np.zeros((model.n_joints, 3))
        for j in packed.order:
            p = packed.parents[j]
            rest[j] = offsets[j] if p < 0 else rest[p] + offsets[j]
    A, tloc, prefix, suffix = kernels.local_transforms(
        q, packed.dof_axis, packed.dof_kind, packed.dof_start
    )
    Rw, drift = kernels.fk_forward(A, tloc, offsets, packed.parents, packed.order)
    v_posed = kernels.skin_forward(Rw, drift, rest, model.skinning_weights, v_shaped)
    return ForwardCache(
        q=q, beta=beta, v_shaped=v_shaped, rest_joints=rest, offsets=offsets,
        A=A, tloc=tloc, prefix=prefix, suffix=suffix, Rw=Rw, drift=drift, v_posed=v_posed,
    )


def backward_pipeline(
    model: ModelDefinition,
    cache: ForwardCache,
    grad_v_posed: np.ndarray,
    grad_joints: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull gradients w.r.t. posed vertices (and optionally the posed joint
    positions) back to the pose and shape vectors.

    Returns ``(grad_q, grad_beta)``.
    """
    packed = model.packed
    gRw, gd, gvs, grj = kernels.skin_backward(
        grad_v_posed, cache.Rw, cache.rest_joints,
        model.skinning_weights, cache.v_shaped,
    )
    if grad_joints is not None:
        gd = gd + grad_joints  # posed joints = rest + drift
        grj = grj + grad_joints
    offsets_full = cache.offsets + cache.tloc
    gA, gu, gd_acc = kernels.fk_backward(
        gRw, gd, cache.A, offsets_full, packed.parents, packed.order, cache.Rw
    )
    gq = kernels.dof_gradients(
        gA, gu, cache.prefix, cache.suffix,
        packed.dof_axis, packed.dof_kind, packed.dof_start,
    )
    # drift_j = drift_p + Rw_p (o_j + tloc_j) - o_j with o_j = r_j - r_parent;
    # the root's offset never enters the drift recursion
    for j in range(model.n_joints):
        p = packed.parents[j]
        if p >= 0:
            go = gu[j] - gd_acc[j]
            grj[j] += go
            grj[p] -= go
    if model.joint_location_regressor is not None:
        gvs = gvs + model.joint_location_regressor.T @ grj
    gbeta = np.einsum("nc,ncb->b", gvs, model.shape_blendshapes)
    return gq, gbeta


def forward_kinematics(model: ModelDefinition, q, beta) -> FKResult:
    """World joint transforms and posed skeleton joints."""
    cache = forward_pipeline(model, q, beta)
    return FKResult(rotations=cache.Rw, positions=cache.joints)


def skin_mesh(model: ModelDefinition, q, beta) -> Mesh:
    """Posed surface mesh by linear blend skinning."""
    cache = forward_pipeline(model, q, beta)
    return Mesh(vertices=cache.v_posed, faces=model.faces)


def regress_joints(model: ModelDefinition, mesh: Mesh | np.ndarray) -> np.ndarray:
    """Keypoint locations as row-stochastic combinations of mesh vertices."""
    v = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=np.float64)
    if v.shape != (model.n_vertices, 3):
        raise ValueError(f"mesh vertices: expected ({model.n_vertices}, 3), got {v.shape}")
    return model.joint_regressor @ v


def clamp_to_limits(model: ModelDefinition, q) -> np.ndarray:
    """Clamp every bounded DoF into its limit interval."""
    q = _check_pose(model, q)
    packed = model.packed
    lo = np.where(np.isnan(packed.dof_lower), -np.inf, packed.dof_lower)
    hi = np.where(np.isnan(packed.dof_upper), np.inf, packed.dof_upper)
    return np.clip(q, lo, hi)
