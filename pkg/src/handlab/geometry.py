"""Pinhole cameras, triangulation, grid unprojection and the 2.5D pose ops."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DEFAULT_REF_BONE, KEYPOINT_COUNT, WRIST_KEYPOINT

MIN_DEPTH = 1e-6
DEGENERACY_CONDITION = 1e8


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class DegenerateGeometryError(ValueError):
    """Triangulation/alignment problem is rank deficient."""


class Recover3DError(ValueError):
    """2.5D input admits no positive-depth 3D interpretation."""


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera; rotation/translation map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world -> camera
    translation: np.ndarray  # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be 3x3 orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def projection_matrix(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def to_dict(self) -> dict:
        return {
            "K": self.intrinsics.tolist(),
            "R": self.rotation.tolist(),
            "t": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        k = np.asarray(data["K"], dtype=np.float64)
        return cls(
            fx=float(k[0, 0]),
            fy=float(k[1, 1]),
            cx=float(k[0, 2]),
            cy=float(k[1, 2]),
            rotation=np.asarray(data["R"], dtype=np.float64),
            translation=np.asarray(data["t"], dtype=np.float64),
            width=int(data["width"]),
            height=int(data["height"]),
        )


def save_cameras(cams: list[Camera], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"views": [c.to_dict() for c in cams]}))


def load_cameras(path: str | Path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    return [Camera.from_dict(v) for v in data["views"]]


@dataclass
class Pose2p5D:
    """Scale-normalized 2.5D pose: pixels + root-relative normalized depths."""

    uv: np.ndarray  # (21,2) pixels
    z_rel: np.ndarray  # (21,) normalized, z_rel[root] == 0
    scale: float  # reference bone length, meters
    root_depth: float | None = None  # normalized root depth, when known
    root: int = WRIST_KEYPOINT


def project(cam: Camera, point: np.ndarray) -> tuple[float, float]:
    """Pinhole projection of a single world point to pixel coordinates."""
    pc = cam.world_to_cam(np.asarray(point, dtype=np.float64))
    if pc[2] <= MIN_DEPTH:
        raise BehindCameraError(f"point depth {pc[2]:.2e} m is not in front of the camera")
    return (cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy)


def project_points(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Vectorized projection of (N,3) world points; raises if any is behind."""
    pc = cam.world_to_cam(points)
    if np.any(pc[:, 2] <= MIN_DEPTH):
        raise BehindCameraError("some points are behind the camera")
    uv = pc[:, :2] / pc[:, 2:3]
    uv[:, 0] = cam.fx * uv[:, 0] + cam.cx
    uv[:, 1] = cam.fy * uv[:, 1] + cam.cy
    return uv


def triangulate(cams: list[Camera], uv: list | np.ndarray) -> np.ndarray:
    """DLT triangulation refined by one Gauss-Newton reprojection pass."""
    if len(cams) < 2:
        raise DegenerateGeometryError("triangulation needs at least 2 views")
    uv = np.asarray(uv, dtype=np.float64)
    rows = []
    for cam, (u, v) in zip(cams, uv):
        p = cam.projection_matrix()
        rows.append(u * p[2] - p[0])
        rows.append(v * p[2] - p[1])
    a = np.vstack(rows)
    # normalize rows to balance the system
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(a)
    if s[2] < s[0] / DEGENERACY_CONDITION:
        raise DegenerateGeometryError(
            f"degenerate ray configuration (condition {s[0] / max(s[2], 1e-300):.1e})"
        )
    x = vt[-1]
    if abs(x[3]) < 1e-12:
        raise DegenerateGeometryError("triangulated point at infinity")
    x = x[:3] / x[3]

    # one Gauss-Newton step on pixel reprojection residuals
    jac = np.zeros((2 * len(cams), 3))
    res = np.zeros(2 * len(cams))
    for i, (cam, (u, v)) in enumerate(zip(cams, uv)):
        pc = cam.world_to_cam(x)
        z = max(pc[2], MIN_DEPTH)
        res[2 * i] = cam.fx * pc[0] / z + cam.cx - u
        res[2 * i + 1] = cam.fy * pc[1] / z + cam.cy - v
        d_pc = cam.rotation
        jac[2 * i] = cam.fx * (d_pc[0] * z - pc[0] * d_pc[2]) / (z * z)
        jac[2 * i + 1] = cam.fy * (d_pc[1] * z - pc[1] * d_pc[2]) / (z * z)
    jtj = jac.T @ jac
    try:
        delta = np.linalg.solve(jtj, jac.T @ res)
        x = x - delta
    except np.linalg.LinAlgError:
        pass
    return x


def unproject_to_grid(cam: Camera, view_map: np.ndarray, grid) -> np.ndarray:
    """Sample a 2D scalar map at every voxel center's projection.

    Returns an (N,N,N) volume indexed [z,y,x]; voxels that project outside
    the map (or behind the camera) get 0. In-bounds samples are bilinear
    with clamp-to-edge at the borders.
    """
    view_map = np.asarray(view_map, dtype=np.float64)
    h, w = view_map.shape
    centers = grid.voxel_centers()  # (N^3, 3), z-major
    pc = cam.world_to_cam(centers)
    z = pc[:, 2]
    valid = z > MIN_DEPTH
    out = np.zeros(centers.shape[0])
    if np.any(valid):
        u = cam.fx * pc[valid, 0] / z[valid] + cam.cx
        v = cam.fy * pc[valid, 1] / z[valid] + cam.cy
        inside = (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
        # pixel centers live at integer+0.5; clamp keeps border samples exact
        x = np.clip(u[inside] - 0.5, 0.0, w - 1.0)
        y = np.clip(v[inside] - 0.5, 0.0, h - 1.0)
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = x - x0
        fy = y - y0
        val = (
            view_map[y0, x0] * (1 - fx) * (1 - fy)
            + view_map[y0, x1] * fx * (1 - fy)
            + view_map[y1, x0] * (1 - fx) * fy
            + view_map[y1, x1] * fx * fy
        )
        tmp = np.zeros(valid.sum())
        tmp[inside] = val
        out[valid] = tmp
    n = grid.resolution
    return out.reshape(n, n, n)


def to_2p5d(
    points_cam: np.ndarray, cam: Camera, ref_bone: tuple[int, int] = DEFAULT_REF_BONE
) -> Pose2p5D:
    """Convert camera-frame keypoints to the scale-normalized 2.5D form."""
    p = np.asarray(points_cam, dtype=np.float64)
    if p.shape != (KEYPOINT_COUNT, 3):
        raise ValueError(f"expected ({KEYPOINT_COUNT},3) keypoints")
    a, b = ref_bone
    s = float(np.linalg.norm(p[a] - p[b]))
    if s <= MIN_DEPTH:
        raise ValueError("reference bone has zero length")
    if np.any(p[:, 2] <= MIN_DEPTH):
        raise BehindCameraError("keypoints must be in front of the camera")
    uv = p[:, :2] / p[:, 2:3]
    uv[:, 0] = cam.fx * uv[:, 0] + cam.cx
    uv[:, 1] = cam.fy * uv[:, 1] + cam.cy
    z_hat = p[:, 2] / s
    root_depth = float(z_hat[WRIST_KEYPOINT])
    return Pose2p5D(uv=uv, z_rel=z_hat - root_depth, scale=s, root_depth=root_depth)


def recover_3d(
    p25: Pose2p5D, cam: Camera, ref_bone: tuple[int, int] = DEFAULT_REF_BONE
) -> np.ndarray:
    """Lift a 2.5D pose back to camera-frame 3D keypoints.

    Solves the quadratic for the normalized root depth that gives the
    reference bone unit normalized length, then back-projects.
    """
    a, b = ref_bone
    xn = (p25.uv[:, 0] - cam.cx) / cam.fx  # x/z ray coordinates
    yn = (p25.uv[:, 1] - cam.cy) / cam.fy
    z_rel = p25.z_rel

    # bone endpoints in normalized units: (xn_k*(z_rel_k+t), yn_k*(...), z_rel_k+t)
    dx1, dx0 = xn[a] - xn[b], xn[a] * z_rel[a] - xn[b] * z_rel[b]
    dy1, dy0 = yn[a] - yn[b], yn[a] * z_rel[a] - yn[b] * z_rel[b]
    dz0 = z_rel[a] - z_rel[b]
    qa = dx1 * dx1 + dy1 * dy1
    qb = 2.0 * (dx1 * dx0 + dy1 * dy0)
    qc = dx0 * dx0 + dy0 * dy0 + dz0 * dz0 - 1.0

    if qa < 1e-18:
        if abs(qb) < 1e-18:
            raise Recover3DError("reference bone length is independent of root depth")
        roots = [-qc / qb]
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0:
            raise Recover3DError("no real root depth satisfies the bone constraint")
        sq = np.sqrt(disc)
        roots = [(-qb - sq) / (2 * qa), (-qb + sq) / (2 * qa)]

    feasible = [t for t in roots if np.all(z_rel + t > MIN_DEPTH)]
    if not feasible:
        raise Recover3DError("no root depth yields positive keypoint depths")
    if len(feasible) > 1 and p25.root_depth is not None:
        # both interpretations are valid; a known root depth disambiguates
        t = min(feasible, key=lambda r: abs(r - p25.root_depth))
    else:
        t = max(feasible)
    z = z_rel + t
    points = np.stack([xn * z, yn * z, z], axis=1)
    return points * p25.scale
