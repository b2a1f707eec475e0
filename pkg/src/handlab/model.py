"""Deformable hand model: definition, synthesis, loading and posing.

The model maps a 61-dim parameter vector (10 shape + 45 articulation +
6 global) to a posed mesh and 21 keypoints via linear blend skinning.
All lengths are meters, all angles radians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MODEL_FORMAT_VERSION = 1

SHAPE_DIM = 10
ARTICULATION_DIM = 45
JOINT_COUNT = 16
KEYPOINT_COUNT = 21
PARAM_DIM = 61  # 10 shape + 45 articulation + 6 global

WRIST_KEYPOINT = 0
FINGERTIP_KEYPOINTS = (4, 8, 12, 16, 20)
SPARSE_KEYPOINTS = (0, 4, 8, 12, 16, 20)  # wrist + five fingertips
# wrist -> middle-finger MCP, the default normalization bone
DEFAULT_REF_BONE = (0, 9)

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed as the expected format."""


class ModelInvariantError(ValueError):
    """Raised when model data violates a structural invariant."""


@dataclass(eq=False)
class HandModelDef:
    """Immutable hand model definition.

    Shapes: template_vertices (V,3), faces (F,3), shape_basis (10,V,3),
    pose_mean (45,), pose_pca_basis (45,K), skinning_weights (V,16),
    kinematic_parents (16,) with -1 for the root, joint_regressor (16,V),
    keypoint_regressor (21,V).
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    pose_mean: np.ndarray
    pose_pca_basis: np.ndarray
    skinning_weights: np.ndarray
    kinematic_parents: np.ndarray
    joint_regressor: np.ndarray
    keypoint_regressor: np.ndarray
    _torch_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_vertices(self) -> int:
        return int(self.template_vertices.shape[0])

    @property
    def pose_dim(self) -> int:
        return int(self.pose_pca_basis.shape[1])

    @property
    def num_params(self) -> int:
        return SHAPE_DIM + self.pose_dim + 6

    @property
    def rest_joint_offsets(self) -> np.ndarray:
        """Rest-pose joint locations, derived as joint_regressor @ template."""
        return self.joint_regressor @ self.template_vertices

    def validate(self) -> None:
        """Check all structural invariants, raising ModelInvariantError."""
        v = self.num_vertices
        if self.template_vertices.shape != (v, 3):
            raise ModelInvariantError("template_vertices must be V x 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelInvariantError("faces must be F x 3")
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=0) >= v:
            raise ModelInvariantError("face vertex index out of range")
        if self.shape_basis.shape != (SHAPE_DIM, v, 3):
            raise ModelInvariantError(
                f"shape_basis must be {SHAPE_DIM} x V x 3, got {self.shape_basis.shape}"
            )
        if self.pose_mean.shape != (ARTICULATION_DIM,):
            raise ModelInvariantError("pose_mean must have 45 entries")
        k = self.pose_pca_basis.shape
        if len(k) != 2 or k[0] != ARTICULATION_DIM or not (1 <= k[1] <= ARTICULATION_DIM):
            raise ModelInvariantError("pose_pca_basis must be 45 x K with K <= 45")
        gram = self.pose_pca_basis.T @ self.pose_pca_basis
        if np.max(np.abs(gram - np.eye(k[1]))) > 1e-6:
            raise ModelInvariantError("pose_pca_basis columns are not orthonormal")

        if self.skinning_weights.shape != (v, JOINT_COUNT):
            raise ModelInvariantError("skinning_weights must be V x 16")
        if self.skinning_weights.min() < 0:
            row = int(np.argmin(self.skinning_weights.min(axis=1)))
            raise ModelInvariantError(f"skinning_weights row {row} has negative entries")
        row_sums = self.skinning_weights.sum(axis=1)
        bad = np.nonzero(np.abs(row_sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise ModelInvariantError(
                f"skinning_weights row {int(bad[0])} sums to {row_sums[bad[0]]:.6f}, expected 1"
            )
        for name, reg, rows in (
            ("joint_regressor", self.joint_regressor, JOINT_COUNT),
            ("keypoint_regressor", self.keypoint_regressor, KEYPOINT_COUNT),
        ):
            if reg.shape != (rows, v):
                raise ModelInvariantError(f"{name} must be {rows} x V")
            sums = reg.sum(axis=1)
            bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
            if bad.size:
                raise ModelInvariantError(
                    f"{name} row {int(bad[0])} sums to {sums[bad[0]]:.6f}, expected 1"
                )

        parents = self.kinematic_parents
        if parents.shape != (JOINT_COUNT,):
            raise ModelInvariantError("kinematic_parents must have 16 entries")
        if parents[0] != -1:
            raise ModelInvariantError("joint 0 must be the root (parent = none)")
        for j in range(1, JOINT_COUNT):
            p = int(parents[j])
            if not 0 <= p < j:
                raise ModelInvariantError(
                    f"kinematic_parents is not a forward tree: joint {j} has parent {p}"
                )

    def to_dict(self) -> dict:
        parents = [None if p < 0 else int(p) for p in self.kinematic_parents]
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "template_vertices": self.template_vertices.tolist(),
            "faces": self.faces.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "pose_mean": self.pose_mean.tolist(),
            "pose_pca_basis": self.pose_pca_basis.tolist(),
            "skinning_weights": self.skinning_weights.tolist(),
            "kinematic_parents": parents,
            "joint_regressor": self.joint_regressor.tolist(),
            "keypoint_regressor": self.keypoint_regressor.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HandModelDef":
        try:
            version = int(data["format_version"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError("missing or invalid format_version") from exc
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format_version {version}")
        try:
            parents = np.array(
                [-1 if p is None else int(p) for p in data["kinematic_parents"]],
                dtype=np.int64,
            )
            model = cls(
                template_vertices=np.asarray(data["template_vertices"], dtype=np.float64),
                faces=np.asarray(data["faces"], dtype=np.int64),
                shape_basis=np.asarray(data["shape_basis"], dtype=np.float64),
                pose_mean=np.asarray(data["pose_mean"], dtype=np.float64),
                pose_pca_basis=np.asarray(data["pose_pca_basis"], dtype=np.float64),
                skinning_weights=np.asarray(data["skinning_weights"], dtype=np.float64),
                kinematic_parents=parents,
                joint_regressor=np.asarray(data["joint_regressor"], dtype=np.float64),
                keypoint_regressor=np.asarray(data["keypoint_regressor"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model document: {exc}") from exc
        model.validate()
        return model


@dataclass
class HandParams:
    """Free parameters of one hand instance: theta = (shape, pose, global)."""

    shape: np.ndarray
    pose_coeffs: np.ndarray
    global_rot: np.ndarray
    global_trans: np.ndarray

    @classmethod
    def mean(cls, model: HandModelDef) -> "HandParams":
        return cls(
            shape=np.zeros(SHAPE_DIM),
            pose_coeffs=np.zeros(model.pose_dim),
            global_rot=np.zeros(3),
            global_trans=np.zeros(3),
        )

    @classmethod
    def from_vector(cls, theta: np.ndarray, pose_dim: int = ARTICULATION_DIM) -> "HandParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (SHAPE_DIM + pose_dim + 6,):
            raise ValueError(f"expected {SHAPE_DIM + pose_dim + 6} parameters, got {theta.shape}")
        return cls(
            shape=theta[:SHAPE_DIM].copy(),
            pose_coeffs=theta[SHAPE_DIM : SHAPE_DIM + pose_dim].copy(),
            global_rot=theta[SHAPE_DIM + pose_dim : SHAPE_DIM + pose_dim + 3].copy(),
            global_trans=theta[SHAPE_DIM + pose_dim + 3 :].copy(),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.shape, self.pose_coeffs, self.global_rot, self.global_trans])

    def articulation(self, model: HandModelDef) -> np.ndarray:
        """Full 45-dim articulation: pose_mean + pose_pca_basis @ pose_coeffs."""
        return model.pose_mean + model.pose_pca_basis @ self.pose_coeffs

    def copy(self) -> "HandParams":
        return HandParams(
            self.shape.copy(),
            self.pose_coeffs.copy(),
            self.global_rot.copy(),
            self.global_trans.copy(),
        )


@dataclass
class HandMesh:
    """Posed mesh in world frame: vertices (V,3) and keypoints (21,3).

    faces are carried along from the model so the mesh is self-contained
    for rasterization.
    """

    vertices: np.ndarray
    keypoints: np.ndarray
    faces: np.ndarray | None = None


def load_model(path: str | Path) -> HandModelDef:
    """Load a model document (JSON, format_version 1) and validate it."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ModelFormatError("model document must be a JSON object")
    return HandModelDef.from_dict(data)


def save_model(model: HandModelDef, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


# ---------------------------------------------------------------------------
# synthetic model construction


def _stitch_rings(ring_a: list[int], ring_b: list[int], faces: list) -> None:
    # Zipper two closed vertex rings (possibly different sizes) into a band.
    m, n = len(ring_a), len(ring_b)
    i = j = 0
    while i < m or j < n:
        if j >= n or (i < m and (i + 1) * n <= (j + 1) * m):
            faces.append((ring_a[i % m], ring_a[(i + 1) % m], ring_b[j % n]))
            i += 1
        else:
            faces.append((ring_b[(j + 1) % n], ring_b[j % n], ring_a[i % m]))
            j += 1


def _ring_sizes(body_count: int) -> list[int]:
    if body_count < 6:
        return [body_count]
    size = 6 if body_count >= 12 else 3
    n_rings = body_count // size
    sizes = [size] * n_rings
    sizes[-1] += body_count - size * n_rings
    return sizes


def _orthobasis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def _build_capsule(start, end, radius, vertex_budget, verts, faces):
    """Append a cone-capped cylinder from start to end.

    Returns (joint_ring, tip_pole): vertex indices of the ring centered
    exactly at `start` (or nearest to it) and of the far pole vertex.
    """
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    axis = end - start
    length = np.linalg.norm(axis)
    axis = axis / length
    e1, e2 = _orthobasis(axis)

    sizes = _ring_sizes(vertex_budget - 2)
    n_rings = len(sizes)
    ts = [0.5] if n_rings == 1 else [k / (n_rings - 1) for k in range(n_rings)]

    base = len(verts)
    verts.append(start - radius * axis)  # near pole
    rings: list[list[int]] = []
    for size, t in zip(sizes, ts):
        center = start + t * length * axis
        ring = []
        for k in range(size):
            ang = 2.0 * np.pi * k / size
            ring.append(len(verts))
            verts.append(center + radius * (np.cos(ang) * e1 + np.sin(ang) * e2))
        rings.append(ring)
    tip_pole = len(verts)
    verts.append(end + radius * axis)

    first, last = rings[0], rings[-1]
    for k in range(len(first)):
        faces.append((base, first[(k + 1) % len(first)], first[k]))
    for a, b in zip(rings[:-1], rings[1:]):
        _stitch_rings(a, b, faces)
    for k in range(len(last)):
        faces.append((tip_pole, last[k], last[(k + 1) % len(last)]))
    return rings[0], tip_pole


def _hand_skeleton(rng: np.random.Generator):
    """Rest-pose joint/tip layout with mild seeded size variation."""
    jitter = lambda: 1.0 + 0.06 * (rng.random() - 0.5)
    mcp = {
        "thumb": np.array([-0.050, 0.030, 0.0]),
        "index": np.array([-0.026, 0.086, 0.0]),
        "middle": np.array([0.000, 0.092, 0.0]),
        "ring": np.array([0.024, 0.086, 0.0]),
        "pinky": np.array([0.046, 0.074, 0.0]),
    }
    seg_lengths = {
        "thumb": (0.034, 0.028, 0.022),
        "index": (0.040, 0.024, 0.020),
        "middle": (0.044, 0.027, 0.021),
        "ring": (0.041, 0.025, 0.020),
        "pinky": (0.031, 0.020, 0.018),
    }
    radii = {
        "thumb": 0.0105,
        "index": 0.0085,
        "middle": 0.0088,
        "ring": 0.0082,
        "pinky": 0.0072,
    }
    directions = {
        "thumb": np.array([-0.62, 0.78, 0.0]),
        "index": np.array([-0.12, 0.99, 0.0]),
        "middle": np.array([0.0, 1.0, 0.0]),
        "ring": np.array([0.10, 0.99, 0.0]),
        "pinky": np.array([0.22, 0.97, 0.0]),
    }

    joints = np.zeros((JOINT_COUNT, 3))  # joint 0 = wrist at origin
    tips = np.zeros((5, 3))
    finger_radius = {}
    for f, name in enumerate(FINGER_NAMES):
        d = directions[name] / np.linalg.norm(directions[name])
        base = mcp[name] * jitter()
        l1, l2, l3 = (s * jitter() for s in seg_lengths[name])
        joints[1 + 3 * f] = base
        joints[2 + 3 * f] = base + l1 * d
        joints[3 + 3 * f] = base + (l1 + l2) * d
        tips[f] = base + (l1 + l2 + l3) * d
        finger_radius[f] = radii[name] * jitter()
    parents = np.full(JOINT_COUNT, -1, dtype=np.int64)
    for f in range(5):
        parents[1 + 3 * f] = 0
        parents[2 + 3 * f] = 1 + 3 * f
        parents[3 + 3 * f] = 2 + 3 * f
    return joints, tips, parents, finger_radius


def _shape_bases(rng, verts, bone_owner, bone_axis_t, joints):
    """Ten smooth V x 3 deformation fields, a few millimeters per unit."""
    v = verts.shape[0]
    centered = verts - verts.mean(axis=0)
    bases = np.zeros((SHAPE_DIM, v, 3))
    # structured modes: scale, finger length, thickness, palm width
    bases[0] = 0.018 * centered
    along = np.zeros((v, 3))
    for i in range(v):
        f = bone_owner[i]
        if f >= 1:  # finger bones stretch along their finger direction
            j = 1 + 3 * ((f - 1) % 5)
            d = joints[j + 1] - joints[j]
            along[i] = d / np.linalg.norm(d) * bone_axis_t[i]
    bases[1] = 0.012 * along
    radial = centered.copy()
    radial[:, 1] = 0.0
    bases[2] = 0.10 * radial
    bases[3] = np.stack([0.05 * centered[:, 0], np.zeros(v), np.zeros(v)], axis=1)
    # seeded smooth random fields from low-order position polynomials
    x, y, z = centered.T
    feats = np.stack(
        [np.ones(v), x, y, z, x * y, y * z, x * z, x * x, y * y, z * z], axis=1
    )
    scale = np.array([0.3, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0])
    for b in range(4, SHAPE_DIM):
        coeffs = rng.standard_normal((10, 3)) * scale[:, None]
        field_v = feats @ coeffs
        rms = np.sqrt((field_v**2).sum(axis=1).mean())
        bases[b] = field_v * (0.0025 / max(rms, 1e-12))
    return bases


def synth_model(seed: int, vertex_count: int = 778, pose_dim: int = ARTICULATION_DIM) -> HandModelDef:
    """Generate a deterministic capsule-per-bone hand model.

    16 joints (wrist + 3 per finger), 21 regressed keypoints including the
    five fingertips, 10 shape blendshapes and an orthonormal pose basis.
    """
    if vertex_count < 100:
        raise ValueError(f"vertex_count must be >= 100, got {vertex_count}")
    if not 1 <= pose_dim <= ARTICULATION_DIM:
        raise ValueError("pose_dim must be in [1, 45]")
    rng = np.random.default_rng(seed)
    joints, tips, parents, finger_radius = _hand_skeleton(rng)

    # bone list: 5 palm capsules (wrist->MCP) then 15 finger segments
    bones = []  # (start, end, radius, owner_joint, blend_child_joint)
    palm_radius = 0.0135
    for f in range(5):
        bones.append((joints[0], joints[1 + 3 * f], palm_radius, 0, 1 + 3 * f))
    for f in range(5):
        r = finger_radius[f]
        mcp, pip, dip = 1 + 3 * f, 2 + 3 * f, 3 + 3 * f
        bones.append((joints[mcp], joints[pip], r, mcp, pip))
        bones.append((joints[pip], joints[dip], r * 0.92, pip, dip))
        bones.append((joints[dip], tips[f], r * 0.85, dip, None))

    # budget: minimum 5 verts per capsule, extras weighted toward the palm
    weights = np.array([2.0] * 5 + [1.0] * 15)
    extra = vertex_count - 5 * len(bones)
    alloc = np.full(len(bones), 5, dtype=int)
    shares = np.floor(extra * weights / weights.sum()).astype(int)
    alloc += shares
    remainder = vertex_count - alloc.sum()
    for i in range(remainder):
        alloc[i % len(bones)] += 1

    verts: list[np.ndarray] = []
    faces: list[tuple] = []
    joint_rings: dict[int, list[int]] = {}
    tip_poles: dict[int, int] = {}
    bone_of_vertex = []
    for b, (start, end, radius, owner, _child) in enumerate(bones):
        v_before = len(verts)
        ring, pole = _build_capsule(start, end, radius, alloc[b], verts, faces)
        bone_of_vertex.extend([b] * (len(verts) - v_before))
        if b < 5:
            joint_rings.setdefault(0, []).extend(ring)
        else:
            joint_rings.setdefault(owner, []).extend(ring)
        if b >= 5 and (b - 5) % 3 == 2:
            tip_poles[(b - 5) // 3] = pole
    vertices = np.array(verts)
    faces_arr = np.array(faces, dtype=np.int64)
    assert vertices.shape[0] == vertex_count

    # skinning: owner joint, blending toward the child joint near the far end
    skin = np.zeros((vertex_count, JOINT_COUNT))
    axis_t = np.zeros(vertex_count)
    for i in range(vertex_count):
        b = bone_of_vertex[i]
        start, end, _radius, owner, child = bones[b]
        axis = end - start
        t = float(np.dot(vertices[i] - start, axis) / np.dot(axis, axis))
        axis_t[i] = np.clip(t, 0.0, 1.0)
        blend_zone = 0.30
        if child is not None and t > 1.0 - blend_zone:
            w_child = 0.5 * min((t - (1.0 - blend_zone)) / blend_zone, 1.0)
            skin[i, child] = w_child
            skin[i, owner] = 1.0 - w_child
        else:
            skin[i, owner] = 1.0

    joint_reg = np.zeros((JOINT_COUNT, vertex_count))
    for j in range(JOINT_COUNT):
        ring = joint_rings[j]
        joint_reg[j, ring] = 1.0 / len(ring)
    keypoint_reg = np.zeros((KEYPOINT_COUNT, vertex_count))
    keypoint_reg[0] = joint_reg[0]
    for f in range(5):
        for s in range(3):  # MCP, PIP, DIP rows copy the joint rows
            keypoint_reg[1 + 4 * f + s] = joint_reg[1 + 3 * f + s]
        keypoint_reg[4 + 4 * f, tip_poles[f]] = 1.0

    bone_owner_field = np.array(
        [0 if bone_of_vertex[i] < 5 else 1 + (bone_of_vertex[i] - 5) // 3 for i in range(vertex_count)]
    )
    shape_basis = _shape_bases(rng, vertices, bone_owner_field, axis_t, joints)

    if pose_dim == ARTICULATION_DIM:
        pca = np.eye(ARTICULATION_DIM)
    else:
        q, _ = np.linalg.qr(rng.standard_normal((ARTICULATION_DIM, ARTICULATION_DIM)))
        pca = q[:, :pose_dim]

    model = HandModelDef(
        template_vertices=vertices,
        faces=faces_arr,
        shape_basis=shape_basis,
        pose_mean=np.zeros(ARTICULATION_DIM),
        pose_pca_basis=pca,
        skinning_weights=skin,
        kinematic_parents=parents,
        joint_regressor=joint_reg,
        keypoint_regressor=keypoint_reg,
    )
    model.validate()
    return model


def sample_articulation(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Random articulation within loose anatomical limits (45 axis-angle dims).

    Axis convention at rest: x = flexion (finger curl), z = abduction,
    y = twist. PIP/DIP joints flex only.
    """
    beta = np.zeros(ARTICULATION_DIM)
    for f in range(5):
        curl = rng.uniform(0.0, 1.1) * scale
        for s in range(3):
            j = 3 * (3 * f + s)
            flex = curl * rng.uniform(0.6, 1.2)
            beta[j + 0] = min(flex, 1.5)
            if s == 0:
                beta[j + 2] = rng.uniform(-0.22, 0.22) * scale
                beta[j + 1] = rng.uniform(-0.05, 0.05) * scale
    return beta


# ---------------------------------------------------------------------------
# forward kinematics (torch core, numpy API)


def rodrigues_torch(omega: torch.Tensor) -> torch.Tensor:
    """Axis-angle (...,3) to rotation matrices (...,3,3), stable near zero."""
    theta_sq = (omega * omega).sum(-1)
    small = theta_sq < 1e-12
    theta_sq_safe = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(theta_sq_safe)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq_safe)
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    zeros = torch.zeros_like(wx)
    k = torch.stack(
        [
            torch.stack([zeros, -wz, wy], -1),
            torch.stack([wz, zeros, -wx], -1),
            torch.stack([-wy, wx, zeros], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=omega.dtype).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _model_tensors(model: HandModelDef) -> dict:
    cache = model._torch_cache
    if "template" not in cache:
        t = lambda arr: torch.as_tensor(arr, dtype=torch.float64)
        cache["template"] = t(model.template_vertices)
        cache["shape_basis"] = t(model.shape_basis)
        cache["pose_mean"] = t(model.pose_mean)
        cache["pose_pca"] = t(model.pose_pca_basis)
        cache["skin"] = t(model.skinning_weights)
        cache["joint_reg"] = t(model.joint_regressor)
        cache["keypoint_reg"] = t(model.keypoint_regressor)
        cache["parents"] = [int(p) for p in model.kinematic_parents]
        # reduced keypoint maps: keypoint_reg folded through the skinning
        # weights so keypoints come out without posing all vertices
        b = np.einsum("kv,vj->jkv", model.keypoint_regressor, model.skinning_weights)
        cache["kp_base"] = t(np.einsum("jkv,va->jka", b, model.template_vertices))
        cache["kp_shape"] = t(np.einsum("jkv,bva->jbka", b, model.shape_basis))
        cache["kp_wsum"] = t(b.sum(axis=2))  # (16, 21)
        cache["joint_base"] = t(model.joint_regressor @ model.template_vertices)
        cache["joint_shape"] = t(
            np.einsum("jv,bva->bja", model.joint_regressor, model.shape_basis)
        )
    return cache


def _kinematic_chain(mt: dict, joints: torch.Tensor, beta: torch.Tensor):
    """World rotation/position per joint from rest joints and articulation."""
    local_rots = rodrigues_torch(beta.reshape(JOINT_COUNT - 1, 3))
    rot_world = [torch.eye(3, dtype=joints.dtype)]
    pos_world = [joints[0]]
    for j in range(1, JOINT_COUNT):
        p = mt["parents"][j]
        rot_world.append(rot_world[p] @ local_rots[j - 1])
        pos_world.append(pos_world[p] + rot_world[p] @ (joints[j] - joints[p]))
    return torch.stack(rot_world), torch.stack(pos_world)


def forward_torch(
    model: HandModelDef,
    shape: torch.Tensor,
    pose_coeffs: torch.Tensor,
    global_rot: torch.Tensor,
    global_trans: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable LBS forward pass; returns (vertices, keypoints)."""
    mt = _model_tensors(model)
    beta = mt["pose_mean"] + mt["pose_pca"] @ pose_coeffs
    v_shaped = mt["template"] + torch.einsum("s,svd->vd", shape, mt["shape_basis"])
    joints = mt["joint_reg"] @ v_shaped
    rot_stack, pos_stack = _kinematic_chain(mt, joints, beta)

    # skinning transform per joint: x -> R_j (x - joint_j) + pos_j
    offsets = pos_stack - torch.einsum("jab,jb->ja", rot_stack, joints)
    per_joint = torch.einsum("jab,vb->jva", rot_stack, v_shaped) + offsets[:, None, :]
    v_posed = torch.einsum("vj,jva->va", mt["skin"], per_joint)

    r_global = rodrigues_torch(global_rot)
    v_world = v_posed @ r_global.T + global_trans
    keypoints = mt["keypoint_reg"] @ v_world
    return v_world, keypoints


def keypoints_torch(
    model: HandModelDef,
    shape: torch.Tensor,
    pose_coeffs: torch.Tensor,
    global_rot: torch.Tensor,
    global_trans: torch.Tensor,
) -> torch.Tensor:
    """Keypoints only, via the reduced regressors; matches forward_torch."""
    mt = _model_tensors(model)
    beta = mt["pose_mean"] + mt["pose_pca"] @ pose_coeffs
    joints = mt["joint_base"] + torch.einsum("b,bja->ja", shape, mt["joint_shape"])
    rot_stack, pos_stack = _kinematic_chain(mt, joints, beta)
    offsets = pos_stack - torch.einsum("jab,jb->ja", rot_stack, joints)

    kp_local = mt["kp_base"] + torch.einsum("b,jbka->jka", shape, mt["kp_shape"])
    kp_posed = torch.einsum("jka,jba->kb", kp_local, rot_stack) + torch.einsum(
        "jk,ja->ka", mt["kp_wsum"], offsets
    )
    r_global = rodrigues_torch(global_rot)
    return kp_posed @ r_global.T + global_trans


def forward(model: HandModelDef, params: HandParams) -> HandMesh:
    """Pose the model: blendshapes, FK along the tree, skinning, global SE3."""
    _check_dims(model, params)
    with torch.no_grad():
        v, k = forward_torch(
            model,
            torch.as_tensor(params.shape, dtype=torch.float64),
            torch.as_tensor(params.pose_coeffs, dtype=torch.float64),
            torch.as_tensor(params.global_rot, dtype=torch.float64),
            torch.as_tensor(params.global_trans, dtype=torch.float64),
        )
    return HandMesh(vertices=v.numpy(), keypoints=k.numpy(), faces=model.faces)


def forward_with_gradients(
    model: HandModelDef, params: HandParams
) -> tuple[HandMesh, np.ndarray, np.ndarray]:
    """Forward pass plus full jacobians w.r.t. the flat parameter vector.

    Returns (mesh, d_vertices (V,3,P), d_keypoints (21,3,P)) with P the
    parameter count (61 for the full pose basis).
    """
    _check_dims(model, params)
    pd = model.pose_dim
    theta = torch.as_tensor(params.as_vector(), dtype=torch.float64)

    def flat_forward(t):
        v, k = forward_torch(
            model,
            t[:SHAPE_DIM],
            t[SHAPE_DIM : SHAPE_DIM + pd],
            t[SHAPE_DIM + pd : SHAPE_DIM + pd + 3],
            t[SHAPE_DIM + pd + 3 :],
        )
        return torch.cat([v.reshape(-1), k.reshape(-1)])

    jac = torch.func.jacfwd(flat_forward)(theta)
    mesh = forward(model, params)
    nv = model.num_vertices
    d_verts = jac[: nv * 3].reshape(nv, 3, model.num_params).numpy()
    d_kps = jac[nv * 3 :].reshape(KEYPOINT_COUNT, 3, model.num_params).numpy()
    return mesh, d_verts, d_kps


def _check_dims(model: HandModelDef, params: HandParams) -> None:
    if params.shape.shape != (SHAPE_DIM,):
        raise ValueError(f"shape must have {SHAPE_DIM} entries")
    if params.pose_coeffs.shape != (model.pose_dim,):
        raise ValueError(
            f"pose_coeffs must have {model.pose_dim} entries, got {params.pose_coeffs.shape}"
        )
    if params.global_rot.shape != (3,) or params.global_trans.shape != (3,):
        raise ValueError("global_rot and global_trans must have 3 entries each")
