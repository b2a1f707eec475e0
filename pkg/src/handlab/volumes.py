"""Per-keypoint score volumes: targets, loss, peak extraction, confidence.

A simulated predictor stands in for the learned multi-view network: it
perturbs ground-truth keypoints and emits Gaussian peaks whose amplitude
drops with the perturbation size, so confidence tracks accuracy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, triangulate

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1

DEFAULT_RESOLUTION = 64
DEFAULT_EXTENT = 0.4  # meters
TARGET_SIGMA_VOX = 2.0
PREDICTOR_SIGMA0_VOX = 3.0


@dataclass(frozen=True)
class VolumeGrid:
    """Cubic voxel grid: N voxels per axis spanning `extent` around `center`."""

    resolution: int = DEFAULT_RESOLUTION
    extent: float = DEFAULT_EXTENT
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("grid resolution must be >= 8")
        if self.extent <= 0:
            raise ValueError("grid extent must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def voxel_size(self) -> float:
        return self.extent / self.resolution

    def axis_coords(self) -> np.ndarray:
        n = self.resolution
        return (np.arange(n) + 0.5) / n * self.extent - self.extent / 2.0

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, (N^3,3), z-major order."""
        c = self.axis_coords()
        zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        return pts + self.center

    def contains(self, point: np.ndarray) -> bool:
        return bool(np.all(np.abs(np.asarray(point) - self.center) <= self.extent / 2.0))

    def index_to_world(self, iz: int, iy: int, ix: int) -> np.ndarray:
        c = self.axis_coords()
        return self.center + np.array([c[ix], c[iy], c[iz]])


@dataclass
class ScoreVolumeSet:
    """K score volumes over a shared grid; arrays indexed [k, z, y, x]."""

    grid: VolumeGrid
    volumes: np.ndarray
    out_of_grid: np.ndarray | None = None  # per-keypoint flag, set by producers

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        n = self.grid.resolution
        if self.volumes.ndim != 4 or self.volumes.shape[1:] != (n, n, n):
            raise ValueError("volumes must have shape (K, N, N, N)")
        if self.volumes.min() < 0.0 or self.volumes.max() > 1.0:
            raise ValueError("volume values must lie in [0,1]")

    @property
    def num_keypoints(self) -> int:
        return int(self.volumes.shape[0])


@dataclass
class VolumePeaks:
    """Argmax extraction result: points (K,3), per-keypoint and mean confidence."""

    points: np.ndarray
    confidences: np.ndarray
    mean_confidence: float
    degenerate: np.ndarray  # flags all-zero volumes


def center_grid(
    cams: list[Camera],
    bbox_centers_2d,
    resolution: int = DEFAULT_RESOLUTION,
    extent: float = DEFAULT_EXTENT,
) -> VolumeGrid:
    """Place the grid at the triangulated 2D bounding-box centers."""
    center = triangulate(cams, bbox_centers_2d)
    return VolumeGrid(resolution=resolution, extent=extent, center=center)


def _gaussian_volume(
    grid: VolumeGrid, point: np.ndarray, sigma_vox: float, amplitude: float = 1.0
) -> np.ndarray:
    """Gaussian peak over the grid, computed within a 6-sigma window.

    Values beyond the window are below 2e-8 and stored as exact zeros.
    """
    n = grid.resolution
    c = grid.axis_coords()
    local = np.asarray(point) - grid.center
    out = np.zeros((n, n, n), dtype=np.float32)
    radius = int(np.ceil(6.0 * sigma_vox))
    idx = np.clip(((local + grid.extent / 2.0) / grid.voxel_size).astype(int), 0, n - 1)
    sl = [slice(max(idx[a] - radius, 0), min(idx[a] + radius + 1, n)) for a in (2, 1, 0)]
    dz = (c[sl[0]] - local[2]) ** 2
    dy = (c[sl[1]] - local[1]) ** 2
    dx = (c[sl[2]] - local[0]) ** 2
    dist_sq = dz[:, None, None] + dy[None, :, None] + dx[None, None, :]
    denom = 2.0 * (sigma_vox * grid.voxel_size) ** 2
    out[sl[0], sl[1], sl[2]] = amplitude * np.exp(-dist_sq / denom)
    return out


def make_targets(
    keypoints: np.ndarray, grid: VolumeGrid, sigma_vox: float = TARGET_SIGMA_VOX
) -> ScoreVolumeSet:
    """Unit-peak Gaussian target volume per keypoint.

    Keypoints outside the grid produce an all-zero volume and are flagged
    in ``out_of_grid``.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if not np.all(np.isfinite(keypoints)):
        raise ValueError("keypoints must be finite")
    k = keypoints.shape[0]
    n = grid.resolution
    volumes = np.zeros((k, n, n, n), dtype=np.float32)
    flags = np.zeros(k, dtype=bool)
    for i, p in enumerate(keypoints):
        if not grid.contains(p):
            flags[i] = True
            continue
        volumes[i] = _gaussian_volume(grid, p, sigma_vox)
    return ScoreVolumeSet(grid=grid, volumes=volumes, out_of_grid=flags)


def score_loss(pred: ScoreVolumeSet, target: ScoreVolumeSet) -> float:
    """Mean over keypoints of the Euclidean norm of the voxel difference."""
    if pred.volumes.shape != target.volumes.shape:
        raise ValueError("volume sets have different shapes")
    diff = pred.volumes.astype(np.float64) - target.volumes.astype(np.float64)
    k = pred.num_keypoints
    return float(np.sqrt((diff.reshape(k, -1) ** 2).sum(axis=1)).mean())


def extract_keypoints(svs: ScoreVolumeSet) -> VolumePeaks:
    """Argmax voxel per keypoint (ties: lowest linear index) and confidences."""
    k = svs.num_keypoints
    points = np.zeros((k, 3))
    confs = np.zeros(k)
    degenerate = np.zeros(k, dtype=bool)
    for i in range(k):
        vol = svs.volumes[i]
        flat_idx = int(np.argmax(vol))
        iz, iy, ix = np.unravel_index(flat_idx, vol.shape)
        points[i] = svs.grid.index_to_world(iz, iy, ix)
        confs[i] = float(vol[iz, iy, ix])
        degenerate[i] = confs[i] == 0.0
    return VolumePeaks(
        points=points,
        confidences=confs,
        mean_confidence=float(confs.mean()),
        degenerate=degenerate,
    )


def simulate_predictor(
    gt_keypoints: np.ndarray,
    grid: VolumeGrid,
    skill: float,
    seed: int,
    sigma_vox: float = TARGET_SIGMA_VOX,
) -> ScoreVolumeSet:
    """Emit noisy score volumes around ground-truth keypoints.

    Displacements are isotropic normal with std sigma0/(1+skill) voxels
    (sigma0 = 3); peak amplitude exp(-|delta|/(2*sigma0)) so larger errors
    carry lower confidence. Deterministic in seed.
    """
    if skill < 0:
        raise ValueError("skill must be >= 0")
    gt_keypoints = np.asarray(gt_keypoints, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k = gt_keypoints.shape[0]
    n = grid.resolution
    sigma_pred = PREDICTOR_SIGMA0_VOX / (1.0 + skill)
    volumes = np.zeros((k, n, n, n), dtype=np.float32)
    flags = np.zeros(k, dtype=bool)
    for i in range(k):
        delta_vox = rng.standard_normal(3) * sigma_pred
        peak = gt_keypoints[i] + delta_vox * grid.voxel_size
        amplitude = float(np.exp(-np.linalg.norm(delta_vox) / (2.0 * PREDICTOR_SIGMA0_VOX)))
        if not grid.contains(peak):
            flags[i] = True
            continue
        volumes[i] = _gaussian_volume(grid, peak, sigma_vox, amplitude)
    return ScoreVolumeSet(grid=grid, volumes=volumes, out_of_grid=flags)


# ---------------------------------------------------------------------------
# binary persistence

_HEADER = struct.Struct("<4sIId3dI")  # magic, version, N, extent, center, K


def save_volumes(svs: ScoreVolumeSet, path: str | Path) -> None:
    """Write header + little-endian float32 voxels, k-major then z,y,x."""
    g = svs.grid
    header = _HEADER.pack(
        SVOL_MAGIC, SVOL_VERSION, g.resolution, g.extent, *g.center, svs.num_keypoints
    )
    data = np.ascontiguousarray(svs.volumes, dtype="<f4").tobytes()
    Path(path).write_bytes(header + data)


def load_volumes(path: str | Path) -> ScoreVolumeSet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError("truncated score-volume file")
    magic, version, n, extent, cx, cy, cz, k = _HEADER.unpack_from(blob)
    if magic != SVOL_MAGIC:
        raise ValueError("not a score-volume file (bad magic)")
    if version != SVOL_VERSION:
        raise ValueError(f"unsupported score-volume version {version}")
    expected = _HEADER.size + k * n * n * n * 4
    if len(blob) != expected:
        raise ValueError(f"score-volume payload size mismatch: {len(blob)} != {expected}")
    volumes = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(k, n, n, n)
    grid = VolumeGrid(resolution=n, extent=extent, center=np.array([cx, cy, cz]))
    return ScoreVolumeSet(grid=grid, volumes=volumes.copy())
