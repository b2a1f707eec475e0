"""Silhouette rendering (hard and differentiable soft), EDT and mask IoU."""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import distance_transform_edt

from .geometry import Camera, MIN_DEPTH
from .model import HandMesh

EDT_EMPTY_SENTINEL = np.finfo(np.float64).max
# an edge counts as exposed if it passes within this many pixels of the
# rasterized mask boundary
_EXPOSURE_TOL = 1.5


@dataclass
class Mask:
    """2D scalar mask with values in [0,1]; 1 is foreground."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mask values must be 2D")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("mask values must lie in [0,1]")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def is_hard(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def hard(self) -> np.ndarray:
        """Binary view; soft values are thresholded at 0.5."""
        return self.values >= 0.5

    def save_png(self, path: str | Path) -> None:
        img = Image.fromarray(np.round(self.values * 255).astype(np.uint8), mode="L")
        img.save(path)

    @classmethod
    def load_png(cls, path: str | Path) -> "Mask":
        arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
        return cls(arr)


def _project_for_raster(cam: Camera, vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project without behind-camera errors; returns (uv, depth)."""
    pc = cam.world_to_cam(vertices)
    z = pc[:, 2]
    z_safe = np.maximum(z, MIN_DEPTH)
    uv = np.empty((vertices.shape[0], 2))
    uv[:, 0] = cam.fx * pc[:, 0] / z_safe + cam.cx
    uv[:, 1] = cam.fy * pc[:, 1] / z_safe + cam.cy
    return uv, z


def _mesh_arrays(mesh: HandMesh) -> tuple[np.ndarray, np.ndarray]:
    if mesh.faces is None:
        raise ValueError("mesh carries no face connectivity")
    return np.asarray(mesh.vertices, dtype=np.float64), np.asarray(mesh.faces, dtype=np.int64)


def _raster_loop(uv, z, faces, w, h, want_depth, mask, depth):
    """Triangle rasterization with the top-left fill rule.

    Boundary pixels (edge function exactly 0) belong to the triangle only
    for top edges (horizontal, pointing -x) and left edges (pointing +y),
    so shared edges are covered exactly once.
    """
    for fi in range(faces.shape[0]):
        i0, i1, i2 = faces[fi, 0], faces[fi, 1], faces[fi, 2]
        if z[i0] <= MIN_DEPTH or z[i1] <= MIN_DEPTH or z[i2] <= MIN_DEPTH:
            continue
        ax, ay = uv[i0, 0], uv[i0, 1]
        bx, by = uv[i1, 0], uv[i1, 1]
        cx, cy = uv[i2, 0], uv[i2, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0.0:
            continue
        if area2 < 0.0:  # canonicalize winding
            bx, by, cx, cy = cx, cy, bx, by
            i1, i2 = i2, i1
        lo_x = min(ax, min(bx, cx))
        hi_x = max(ax, max(bx, cx))
        lo_y = min(ay, min(by, cy))
        hi_y = max(ay, max(by, cy))
        x0 = max(int(np.floor(lo_x - 0.5)), 0)
        x1 = min(int(np.ceil(hi_x - 0.5)), w - 1)
        y0 = max(int(np.floor(lo_y - 0.5)), 0)
        y1 = min(int(np.ceil(hi_y - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        tl0 = (by - ay) > 0 or ((by - ay) == 0 and (bx - ax) < 0)
        tl1 = (cy - by) > 0 or ((cy - by) == 0 and (cx - bx) < 0)
        tl2 = (ay - cy) > 0 or ((ay - cy) == 0 and (ax - cx) < 0)
        za, zb, zc = z[i0], z[i1], z[i2]
        for py in range(y0, y1 + 1):
            gy = py + 0.5
            for px in range(x0, x1 + 1):
                gx = px + 0.5
                w0 = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
                w1 = (cx - bx) * (gy - by) - (cy - by) * (gx - bx)
                w2 = (ax - cx) * (gy - cy) - (ay - cy) * (gx - cx)
                ok0 = w0 > 0 or (w0 == 0 and tl0)
                ok1 = w1 > 0 or (w1 == 0 and tl1)
                ok2 = w2 > 0 or (w2 == 0 and tl2)
                if ok0 and ok1 and ok2:
                    mask[py, px] = True
                    if want_depth:
                        total = w0 + w1 + w2
                        inv_z = (w1 / total) / za + (w2 / total) / zb + (w0 / total) / zc
                        zi = 1.0 / inv_z
                        if zi < depth[py, px]:
                            depth[py, px] = zi


try:  # numba keeps per-step rasterization cheap during fitting
    import numba

    _raster_loop_fast = numba.njit(cache=True, nogil=True)(_raster_loop)
except ImportError:  # pragma: no cover - numba is an optional speedup
    _raster_loop_fast = _raster_loop


def _coverage(uv: np.ndarray, z: np.ndarray, faces: np.ndarray, w: int, h: int,
              want_depth: bool = False):
    mask = np.zeros((h, w), dtype=np.bool_)
    depth = np.full((h, w), np.inf)
    _raster_loop_fast(
        np.ascontiguousarray(uv, dtype=np.float64),
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(faces, dtype=np.int64),
        w,
        h,
        want_depth,
        mask,
        depth,
    )
    return (mask, depth) if want_depth else mask


def rasterize_hard(mesh: HandMesh, cam: Camera, res: tuple[int, int]) -> Mask:
    """Binary coverage mask of the projected mesh; empty view is all zero."""
    w, h = res
    verts, faces = _mesh_arrays(mesh)
    uv, z = _project_for_raster(cam, verts)
    return Mask(_coverage(uv, z, faces, w, h).astype(np.float64))


def rasterize_depth(mesh: HandMesh, cam: Camera, res: tuple[int, int]) -> np.ndarray:
    """Z-buffer (camera-frame depth, +inf where uncovered)."""
    w, h = res
    verts, faces = _mesh_arrays(mesh)
    uv, z = _project_for_raster(cam, verts)
    _, depth = _coverage(uv, z, faces, w, h, want_depth=True)
    return depth


def edt(mask: Mask) -> np.ndarray:
    """Symmetric exact Euclidean distance to the mask boundary.

    Boundary pixels are foreground pixels 4-adjacent to background or to the
    image border; distances are defined for every pixel (inside and out).
    A mask without foreground yields the largest-finite sentinel everywhere.
    """
    fg = mask.hard()
    if not fg.any():
        warnings.warn("EDT of a mask with no foreground", stacklevel=2)
        return np.full(fg.shape, EDT_EMPTY_SENTINEL)
    boundary = _boundary_pixels(fg)
    return distance_transform_edt(~boundary)


def _boundary_pixels(fg: np.ndarray) -> np.ndarray:
    padded = np.pad(fg, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return fg & ~interior


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union of two (hardened) masks; 1.0 if both empty."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"mask dimensions differ: {a.values.shape} vs {b.values.shape}")
    ha, hb = a.hard(), b.hard()
    union = np.logical_or(ha, hb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ha, hb).sum() / union)


# ---------------------------------------------------------------------------
# soft silhouette


@functools.lru_cache(maxsize=16)
def _edge_table(faces_bytes: bytes, n_faces: int) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges (E,2) and their adjacent faces (E,2), -1 pad."""
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    raw = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    raw_sorted = np.sort(raw, axis=1)
    edges, inverse = np.unique(raw_sorted, axis=0, return_inverse=True)
    adj = np.full((edges.shape[0], 2), -1, dtype=np.int64)
    face_idx = np.tile(np.arange(n_faces), 3)
    for e, f in zip(inverse, face_idx):
        if adj[e, 0] < 0:
            adj[e, 0] = f
        elif adj[e, 1] < 0:
            adj[e, 1] = f
    return edges, adj


def silhouette_edge_indices(uv: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Indices (E,2) of mesh edges on the projected silhouette contour.

    A contour edge separates a front-facing projected triangle (positive
    signed area) from a back-facing or missing one.
    """
    edges, adj = _edge_table(faces.tobytes(), faces.shape[0])
    a = uv[faces[:, 0]]
    b = uv[faces[:, 1]]
    c = uv[faces[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
        c[:, 0] - a[:, 0]
    )
    front = area2 > 0
    f0 = adj[:, 0]
    f1 = adj[:, 1]
    front0 = front[f0]
    front1 = np.where(f1 >= 0, front[np.maximum(f1, 0)], False)
    keep = front0 != front1
    return edges[keep]


_EXPOSURE_SAMPLES = 17


def _exposed_edges(
    uv: np.ndarray, edge_idx: np.ndarray, boundary_dist: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip contour edges to their portions near the rasterized boundary.

    Contour edges of overlapping parts can run deep inside the silhouette;
    only exposed subsegments belong to the outline. Each maximal exposed
    run becomes one subsegment, so an edge may contribute several. Returns
    (edge vertex pairs, t0, t1) with one row per subsegment.
    """
    if edge_idx.size == 0:
        empty = np.zeros(0)
        return edge_idx, empty, empty
    h, w = boundary_dist.shape
    p0 = uv[edge_idx[:, 0]]
    p1 = uv[edge_idx[:, 1]]
    ts = np.linspace(0.0, 1.0, _EXPOSURE_SAMPLES)
    near = np.zeros((edge_idx.shape[0], ts.size), dtype=bool)
    for i, t in enumerate(ts):
        pt = p0 * (1.0 - t) + p1 * t
        x = np.clip(np.round(pt[:, 0] - 0.5).astype(int), 0, w - 1)
        y = np.clip(np.round(pt[:, 1] - 0.5).astype(int), 0, h - 1)
        near[:, i] = boundary_dist[y, x] <= _EXPOSURE_TOL
    # maximal runs of exposed samples, padded by one step on each side
    padded = np.zeros((near.shape[0], near.shape[1] + 2), dtype=bool)
    padded[:, 1:-1] = near
    starts = padded[:, 1:] & ~padded[:, :-1]
    ends = ~padded[:, 1:] & padded[:, :-1]
    e_start, i_start = np.nonzero(starts)
    e_end, i_end = np.nonzero(ends)
    step = 1.0 / (_EXPOSURE_SAMPLES - 1)
    t0 = np.clip((i_start - 0.5) * step, 0.0, 1.0)
    t1 = np.clip((i_end - 0.5) * step, 0.0, 1.0)
    return edge_idx[e_start], t0, t1


def _nearest_edge_loop(centers, p0, seg, out):
    for i in range(centers.shape[0]):
        px, py = centers[i, 0], centers[i, 1]
        best = np.inf
        best_j = 0
        for j in range(p0.shape[0]):
            sx, sy = seg[j, 0], seg[j, 1]
            len_sq = sx * sx + sy * sy
            dxp = px - p0[j, 0]
            dyp = py - p0[j, 1]
            if len_sq > 1e-12:
                t = (dxp * sx + dyp * sy) / len_sq
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            dx = dxp - t * sx
            dy = dyp - t * sy
            d = dx * dx + dy * dy
            if d < best:
                best = d
                best_j = j
        out[i] = best_j


try:
    import numba as _numba

    _nearest_edge_loop_fast = _numba.njit(cache=True, nogil=True)(_nearest_edge_loop)
except ImportError:  # pragma: no cover
    _nearest_edge_loop_fast = _nearest_edge_loop


def _nearest_edge(centers: np.ndarray, p0: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Index of the closest segment (given by p0 + t*seg) per query point."""
    out = np.zeros(centers.shape[0], dtype=np.int64)
    _nearest_edge_loop_fast(
        np.ascontiguousarray(centers),
        np.ascontiguousarray(p0),
        np.ascontiguousarray(seg),
        out,
    )
    return out


def soft_mask_torch(
    uv: torch.Tensor,
    faces: np.ndarray,
    res: tuple[int, int],
    sharpness: float,
    band: float | None = None,
) -> torch.Tensor:
    """Differentiable soft silhouette from projected vertices.

    Each pixel value is sigmoid(sharpness * d) with d the signed distance
    (pixels, positive inside) from the pixel center to the silhouette
    contour. With ``band`` set, only pixels within that distance of the
    boundary get the smooth value; saturated pixels are constant 0/1.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    w, h = res
    uv_np = uv.detach().numpy()

    hard = _coverage(uv_np, np.ones(uv_np.shape[0]), faces, w, h)
    edge_idx = silhouette_edge_indices(uv_np, faces)
    if edge_idx.size == 0:
        return torch.zeros((h, w), dtype=uv.dtype)
    boundary = _boundary_pixels(hard) if hard.any() else np.zeros_like(hard)
    if boundary.any():
        bdist = distance_transform_edt(~boundary)
    else:
        bdist = np.zeros(hard.shape)
    edge_idx, t_lo, t_hi = _exposed_edges(uv_np, edge_idx, bdist)
    if edge_idx.size == 0:
        return torch.zeros((h, w), dtype=uv.dtype)

    sign = np.where(hard, 1.0, -1.0)
    if band is None:
        active_y, active_x = np.mgrid[0:h, 0:w]
        active_y = active_y.ravel()
        active_x = active_x.ravel()
    else:
        active_y, active_x = np.nonzero(bdist <= band)

    # exposed subsegments in numpy for the argmin, then exact torch distance
    centers_np = np.stack([active_x + 0.5, active_y + 0.5], axis=1)
    e0_np = uv_np[edge_idx[:, 0]]
    seg_np = uv_np[edge_idx[:, 1]] - e0_np
    sub0_np = e0_np + t_lo[:, None] * seg_np
    subseg_np = (t_hi - t_lo)[:, None] * seg_np
    nearest = _nearest_edge(centers_np, sub0_np, subseg_np)

    centers = torch.tensor(centers_np, dtype=uv.dtype)
    t_lo_t = torch.tensor(t_lo[nearest], dtype=uv.dtype)
    t_hi_t = torch.tensor(t_hi[nearest], dtype=uv.dtype)
    e0 = uv[edge_idx[nearest, 0]]
    e1 = uv[edge_idx[nearest, 1]]
    p0 = e0 + t_lo_t[:, None] * (e1 - e0)
    seg = (t_hi_t - t_lo_t)[:, None] * (e1 - e0)
    seg_len_sq = (seg * seg).sum(dim=1).clamp_min(1e-12)
    t = (((centers - p0) * seg).sum(dim=1) / seg_len_sq).clamp(0.0, 1.0)
    closest = p0 + t[:, None] * seg
    dist_sq = ((centers - closest) ** 2).sum(dim=1)
    min_dist = torch.sqrt(dist_sq.clamp_min(1e-18))

    sign_t = torch.tensor(sign[active_y, active_x], dtype=uv.dtype)
    values = torch.sigmoid(sharpness * sign_t * min_dist)

    out = torch.tensor(np.where(hard, 1.0, 0.0), dtype=uv.dtype)
    out[active_y, active_x] = values
    return out


def rasterize_soft(
    mesh: HandMesh,
    cam: Camera,
    res: tuple[int, int],
    sharpness: float,
    band: float | None = None,
) -> Mask:
    """Soft silhouette mask; see soft_mask_torch for semantics."""
    verts, faces = _mesh_arrays(mesh)
    uv, z = _project_for_raster(cam, verts)
    faces = visible_faces(faces, z)
    if faces.size == 0:
        if sharpness <= 0:
            raise ValueError("sharpness must be positive")
        return Mask(np.zeros((res[1], res[0])))
    values = soft_mask_torch(torch.tensor(uv, dtype=torch.float64), faces, res, sharpness, band)
    return Mask(values.numpy())


def visible_faces(faces: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Faces whose vertices all lie in front of the camera."""
    return faces[np.all(z[faces] > MIN_DEPTH, axis=1)]


def mask_boundary_polylines(mask: Mask) -> list[np.ndarray]:
    """Chains of boundary pixel centers (u,v), for overlay display."""
    fg = mask.hard()
    boundary = _boundary_pixels(fg)
    remaining = {(int(y), int(x)) for y, x in zip(*np.nonzero(boundary))}
    polylines = []
    neighbors = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    while remaining:
        start = min(remaining)
        remaining.discard(start)
        chain = [start]
        while True:
            y, x = chain[-1]
            nxt = None
            for dy, dx in neighbors:
                cand = (y + dy, x + dx)
                if cand in remaining:
                    nxt = cand
                    break
            if nxt is None:
                break
            remaining.discard(nxt)
            chain.append(nxt)
        pts = np.array([(x + 0.5, y + 0.5) for y, x in chain], dtype=np.float64)
        polylines.append(pts)
    return polylines
