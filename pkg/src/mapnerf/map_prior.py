"""Map prior products: ground mesh, pseudo ground-truth depth, lane distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, TriangleMesh, delaunay_triangulate

__all__ = [
    "HeightFieldMap",
    "LaneVectors",
    "PseudoDepthMap",
    "LaneDistanceMap",
    "build_ground_mesh",
    "render_pseudo_depth",
    "render_lane_distance",
    "point_segment_distance",
]


@dataclass(frozen=True, eq=False)
class HeightFieldMap:
    nodes: np.ndarray  # (N, 3) x, y, z in meters
    spacing: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or len(nodes) < 3:
            raise ValueError("height map needs at least 3 (x, y, z) nodes")
        if not self.spacing > 0:
            raise ValueError("map spacing must be positive")
        object.__setattr__(self, "nodes", nodes)


@dataclass(frozen=True, eq=False)
class LaneVectors:
    polylines: tuple

    def __init__(self, polylines=()):
        lines = []
        for p in polylines:
            p = np.asarray(p, dtype=np.float64)
            if p.ndim != 2 or p.shape[1] != 3 or len(p) < 2:
                raise ValueError("each lane polyline needs at least 2 3D points")
            lines.append(p)
        object.__setattr__(self, "polylines", tuple(lines))

    def __len__(self):
        return len(self.polylines)

    def __iter__(self):
        return iter(self.polylines)


@dataclass(frozen=True, eq=False)
class PseudoDepthMap:
    depth: np.ndarray  # (H, W), NaN where invalid
    valid: np.ndarray  # (H, W) bool


@dataclass(frozen=True, eq=False)
class LaneDistanceMap:
    distance: np.ndarray  # (H, W) pixels, inf when there are no lanes in view


def build_ground_mesh(height_map: HeightFieldMap) -> TriangleMesh:
    """Delaunay-triangulate the map nodes in (x, y) and lift by their heights."""
    nodes = height_map.nodes
    tris = delaunay_triangulate(nodes[:, :2])
    return TriangleMesh(nodes, tris)


def render_pseudo_depth(mesh: TriangleMesh, camera: Camera, far: float = np.inf) -> PseudoDepthMap:
    origins, dirs = camera.pixel_rays()
    t, ids, _ = mesh.intersect(origins, dirs, 0.0, far)
    valid = ids >= 0
    depth = np.where(valid, t, np.nan)
    shape = (camera.height, camera.width)
    return PseudoDepthMap(depth.reshape(shape), valid.reshape(shape))


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances between points (P, 2) and segments (S, 2)-(S, 2); returns (P, S)."""
    ab = b - a
    ap = p[:, None, :] - a[None, :, :]
    denom = (ab * ab).sum(-1)
    s = np.where(denom > 0, (ap * ab[None]).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    closest = a[None] + s[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=-1)


def _project_segments(lanes: LaneVectors, camera: Camera, near_clip: float):
    """Project lane segments; any segment with an endpoint closer than ``near_clip`` is skipped."""
    a_list, b_list = [], []
    R, c = camera.rotation, camera.position
    for line in lanes:
        pc = (line - c) @ R
        a, b = pc[:-1], pc[1:]
        keep = (a[:, 2] >= near_clip) & (b[:, 2] >= near_clip)
        a_list.append(a[keep])
        b_list.append(b[keep])
    if not a_list or not sum(len(a) for a in a_list):
        return np.zeros((0, 2)), np.zeros((0, 2))
    a = np.concatenate(a_list)
    b = np.concatenate(b_list)

    def proj(q):
        return np.stack([camera.fx * q[:, 0] / q[:, 2] + camera.cx, camera.fy * q[:, 1] / q[:, 2] + camera.cy], axis=-1)

    return proj(a), proj(b)


def render_lane_distance(lanes: LaneVectors, camera: Camera, near_clip: float = 1e-3) -> LaneDistanceMap:
    """Per-pixel distance (pixels) from the pixel center to the nearest projected lane segment.

    Segments with an endpoint behind (or within ``near_clip`` meters of) the
    camera plane are skipped.
    """
    shape = (camera.height, camera.width)
    a, b = _project_segments(lanes, camera, near_clip)
    if len(a) == 0:
        return LaneDistanceMap(np.full(shape, np.inf))
    v, u = np.meshgrid(np.arange(camera.height) + 0.5, np.arange(camera.width) + 0.5, indexing="ij")
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    dist = np.full(len(pix), np.inf)
    for lo in range(0, len(a), 256):
        dist = np.minimum(dist, point_segment_distance(pix, a[lo:lo + 256], b[lo:lo + 256]).min(axis=1))
    return LaneDistanceMap(dist.reshape(shape))
