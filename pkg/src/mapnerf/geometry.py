"""Cameras, rays, triangle meshes with a BVH, and 2D Delaunay triangulation.

Conventions used throughout the package:

* world frame is right-handed and z-up, in meters;
* camera frame is x-right, y-down, z-forward (the camera looks along +z);
* a camera pose is the 3x4 matrix ``[R | t]`` mapping camera coordinates to
  world coordinates, so ``t`` is the camera center;
* pixel ``(u, v)`` is sampled at its center ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numba
import numpy as np

__all__ = [
    "Camera",
    "Ray",
    "Hit",
    "TriangleMesh",
    "look_at_pose",
    "ray_for_pixel",
    "intersect_mesh",
    "intersect_mesh_bruteforce",
    "delaunay_triangulate",
]


# ---------------------------------------------------------------------------
# Cameras and rays
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # (3, 4) world-from-camera

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {pose.shape}")
        object.__setattr__(self, "pose", pose)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        R = pose[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("pose rotation is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def position(self) -> np.ndarray:
        return self.pose[:, 3]

    def with_pose(self, pose: np.ndarray) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) -> (pixel coords (..., 2), camera-frame depth z)."""
        pc = (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation
        z = pc[..., 2]
        uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for every pixel, row-major, shape (H*W, 3)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        dirs = _pixel_directions(self, u.ravel().astype(np.float64), v.ravel().astype(np.float64))
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs


def _pixel_directions(cam: Camera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    xc = (u + 0.5 - cam.cx) / cam.fx
    yc = (v + 0.5 - cam.cy) / cam.fy
    d_cam = np.stack([xc, yc, np.ones_like(xc)], axis=-1)
    d = d_cam @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def look_at_pose(position, forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose for a camera at ``position`` looking along ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(r)
    if n < 1e-12:
        raise ValueError("forward direction is parallel to up")
    r /= n
    d = np.cross(f, r)
    pose = np.empty((3, 4))
    pose[:, 0], pose[:, 1], pose[:, 2] = r, d, f
    pose[:, 3] = position
    return pose


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.near < self.far):
            raise ValueError(f"invalid ray interval [{self.near}, {self.far}]")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def ray_for_pixel(camera: Camera, u: int, v: int, near: float = 0.0, far: float = np.inf) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d = _pixel_directions(camera, np.array([float(u)]), np.array([float(v)]))[0]
    return Ray(camera.position.copy(), d, near, far)


# ---------------------------------------------------------------------------
# Triangle meshes, BVH, intersection
# ---------------------------------------------------------------------------


class Hit(NamedTuple):
    t: float
    triangle_id: int
    barycentric: tuple[float, float, float]


_LEAF_SIZE = 4


@dataclass(frozen=True, eq=False)
class _FlatBVH:
    box_min: np.ndarray  # (K, 3)
    box_max: np.ndarray  # (K, 3)
    left: np.ndarray  # (K,) child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray  # triangle ids grouped by leaf


def _build_bvh(tri_min: np.ndarray, tri_max: np.ndarray) -> _FlatBVH:
    """Median split over triangle centroids along the widest centroid axis."""
    cent = 0.5 * (tri_min + tri_max)
    order = np.arange(len(cent))
    box_min, box_max, left, right, start, count = [], [], [], [], [], []

    stack = [(0, len(order), -1, False)]
    while stack:
        lo, hi, parent, is_right = stack.pop()
        node = len(box_min)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        ids = order[lo:hi]
        box_min.append(tri_min[ids].min(axis=0))
        box_max.append(tri_max[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        if hi - lo <= _LEAF_SIZE:
            start.append(lo)
            count.append(hi - lo)
            continue
        start.append(0)
        count.append(0)
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps construction deterministic when centroids tie
        order[lo:hi] = ids[np.argsort(c[:, axis], kind="stable")]
        mid = (lo + hi) // 2
        stack.append((mid, hi, node, True))
        stack.append((lo, mid, node, False))

    return _FlatBVH(
        np.array(box_min), np.array(box_max),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64), np.array(count, dtype=np.int64),
        order.astype(np.int64),
    )


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    bvh: _FlatBVH = field(init=False, repr=False)

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=np.float64)
        F = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if V.ndim != 2 or V.shape[1] != 3 or F.ndim != 2 or F.shape[1] != 3:
            raise ValueError("vertices must be (V, 3) and triangles (F, 3)")
        if len(F) == 0:
            raise ValueError("mesh has no triangles")
        if F.min() < 0 or F.max() >= len(V):
            raise ValueError("triangle index out of range")
        area = 0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1)
        if area.min() <= 1e-12:
            raise ValueError(f"degenerate triangle {int(np.argmin(area))} (area {area.min():.3g})")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)
        corners = V[F]
        object.__setattr__(self, "bvh", _build_bvh(corners.min(axis=1), corners.max(axis=1)))

    def __len__(self) -> int:
        return len(self.triangles)

    def intersect(self, origins, directions, near=0.0, far=np.inf):
        """Nearest hits for a batch of rays via the BVH.

        Returns ``(t, triangle_id, bary)``; misses have ``t = inf`` and id -1.
        """
        o, d, n, f = _batch_args(origins, directions, near, far)
        b = self.bvh
        return _bvh_intersect(self.vertices, self.triangles, b.box_min, b.box_max,
                              b.left, b.right, b.start, b.count, b.order, o, d, n, f)

    def intersect_bruteforce(self, origins, directions, near=0.0, far=np.inf):
        """Exhaustive scan over every triangle; reference for :meth:`intersect`."""
        o, d, n, f = _batch_args(origins, directions, near, far)
        return _brute_intersect(self.vertices, self.triangles, o, d, n, f)


def _batch_args(origins, directions, near, far):
    o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    n = np.ascontiguousarray(np.broadcast_to(np.asarray(near, dtype=np.float64), (len(d),)))
    f = np.ascontiguousarray(np.broadcast_to(np.asarray(far, dtype=np.float64), (len(d),)))
    return o, d, n, f


@numba.njit(cache=True, error_model="numpy")
def _tri_hit(V, F, tri, ox, oy, oz, dx, dy, dz):
    """Moller-Trumbore. Returns (t, b1, b2); t = inf on miss."""
    i0, i1, i2 = F[tri, 0], F[tri, 1], F[tri, 2]
    v0x, v0y, v0z = V[i0, 0], V[i0, 1], V[i0, 2]
    e1x, e1y, e1z = V[i1, 0] - v0x, V[i1, 1] - v0y, V[i1, 2] - v0z
    e2x, e2y, e2z = V[i2, 0] - v0x, V[i2, 1] - v0y, V[i2, 2] - v0z
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - v0x, oy - v0y, oz - v0z
    b1 = (sx * px + sy * py + sz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, b1, b2


@numba.njit(cache=True, error_model="numpy", parallel=True)
def _brute_intersect(V, F, O, D, near, far):
    n = O.shape[0]
    t_out = np.full(n, np.inf)
    id_out = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    for r in numba.prange(n):
        best, best_id, bb1, bb2 = np.inf, -1, 0.0, 0.0
        for tri in range(F.shape[0]):
            t, b1, b2 = _tri_hit(V, F, tri, O[r, 0], O[r, 1], O[r, 2], D[r, 0], D[r, 1], D[r, 2])
            if near[r] <= t <= far[r] and (t < best or (t == best and tri < best_id)):
                best, best_id, bb1, bb2 = t, tri, b1, b2
        if best_id >= 0:
            t_out[r], id_out[r] = best, best_id
            bary[r, 0], bary[r, 1], bary[r, 2] = 1.0 - bb1 - bb2, bb1, bb2
    return t_out, id_out, bary


@numba.njit(cache=True, error_model="numpy", parallel=True)
def _bvh_intersect(V, F, bmin, bmax, left, right, start, count, order, O, D, near, far):
    n = O.shape[0]
    t_out = np.full(n, np.inf)
    id_out = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    for r in numba.prange(n):
        ox, oy, oz = O[r, 0], O[r, 1], O[r, 2]
        dx, dy, dz = D[r, 0], D[r, 1], D[r, 2]
        ix, iy, iz = 1.0 / dx, 1.0 / dy, 1.0 / dz
        best, best_id, bb1, bb2 = np.inf, -1, 0.0, 0.0
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slab test; NaN from 0*inf is rejected by the comparisons below
            t0x, t1x = (bmin[node, 0] - ox) * ix, (bmax[node, 0] - ox) * ix
            t0y, t1y = (bmin[node, 1] - oy) * iy, (bmax[node, 1] - oy) * iy
            t0z, t1z = (bmin[node, 2] - oz) * iz, (bmax[node, 2] - oz) * iz
            if t0x > t1x:
                t0x, t1x = t1x, t0x
            if t0y > t1y:
                t0y, t1y = t1y, t0y
            if t0z > t1z:
                t0z, t1z = t1z, t0z
            if not (t0x == t0x):
                t0x, t1x = -np.inf, np.inf
            if not (t0y == t0y):
                t0y, t1y = -np.inf, np.inf
            if not (t0z == t0z):
                t0z, t1z = -np.inf, np.inf
            tmin = max(t0x, t0y, t0z, near[r])
            tmax = min(t1x, t1y, t1z, far[r], best)
            # small slack so hits exactly on box faces are never culled
            if tmin > tmax * (1.0 + 1e-12) + 1e-12:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    tri = order[k]
                    t, b1, b2 = _tri_hit(V, F, tri, ox, oy, oz, dx, dy, dz)
                    if near[r] <= t <= far[r] and (t < best or (t == best and tri < best_id)):
                        best, best_id, bb1, bb2 = t, tri, b1, b2
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        if best_id >= 0:
            t_out[r], id_out[r] = best, best_id
            bary[r, 0], bary[r, 1], bary[r, 2] = 1.0 - bb1 - bb2, bb1, bb2
    return t_out, id_out, bary


def _single(result) -> Optional[Hit]:
    t, ids, bary = result
    if ids[0] < 0:
        return None
    return Hit(float(t[0]), int(ids[0]), tuple(float(b) for b in bary[0]))


def intersect_mesh(ray: Ray, mesh: TriangleMesh) -> Optional[Hit]:
    """Nearest intersection with ``t`` in ``[ray.near, ray.far]``, or None."""
    return _single(mesh.intersect(ray.origin, ray.direction, ray.near, ray.far))


def intersect_mesh_bruteforce(ray: Ray, mesh: TriangleMesh) -> Optional[Hit]:
    return _single(mesh.intersect_bruteforce(ray.origin, ray.direction, ray.near, ray.far))


# ---------------------------------------------------------------------------
# Delaunay triangulation
# ---------------------------------------------------------------------------


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _incircle(a, b, c, d) -> float:
    """Positive iff d is strictly inside the circumcircle of CCW triangle abc."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    return (
        (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        - (bdx * bdx + bdy * bdy) * (adx * cdy - cdx * ady)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    )


def _incircle_many(P, tris, d):
    a, b, c = P[tris[:, 0]] - d, P[tris[:, 1]] - d, P[tris[:, 2]] - d
    la, lb, lc = (a * a).sum(1), (b * b).sum(1), (c * c).sum(1)
    return (
        la * (b[:, 0] * c[:, 1] - c[:, 0] * b[:, 1])
        - lb * (a[:, 0] * c[:, 1] - c[:, 0] * a[:, 1])
        + lc * (a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1])
    )


def _canonical(tri) -> tuple[int, int, int]:
    """Rotate a CCW triangle so its smallest index comes first."""
    k = int(np.argmin(tri))
    return (int(tri[k]), int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3]))


def delaunay_triangulate(points) -> np.ndarray:
    """Delaunay triangulation of 2D points; returns (F, 3) CCW index triples.

    Incremental Bowyer-Watson inside a super-triangle, followed by filling any
    hull pockets the finite super-triangle left behind and a Lawson flip pass.
    Cocircular quadrilaterals keep the diagonal whose pair of triangles
    contains the lexicographically smallest sorted vertex-index triple, so the
    unit square (0,0),(1,0),(1,1),(0,1) gets the 0-2 diagonal.
    """
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    n = len(P)
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    lo, hi = P.min(axis=0), P.max(axis=0)
    scale = float(max(hi - lo))
    rel = P - P[0]
    far = rel[np.argmax((rel * rel).sum(1))]
    cross = rel[:, 0] * far[1] - rel[:, 1] * far[0]
    if scale == 0 or np.abs(cross).max() <= 1e-12 * scale * scale:
        raise ValueError("points are all collinear")
    if len(np.unique(P, axis=0)) != n:
        raise ValueError("duplicate points")

    tol = 1e-12 * scale**4
    center = 0.5 * (lo + hi)
    big = 50.0 * scale
    S = np.vstack([P, [center + [-big, -big], center + [big, -big], center + [0.0, big]]])
    tris = np.array([[n, n + 1, n + 2]], dtype=np.int64)

    for i in range(n):
        bad = _incircle_many(S, tris, S[i]) > tol
        cavity = tris[bad]
        edges: dict[tuple[int, int], int] = {}
        for a, b, c in cavity:
            for e in ((a, b), (b, c), (c, a)):
                edges[e] = edges.get(e, 0) + 1
        boundary = [e for e in edges if (e[1], e[0]) not in edges]
        new = np.array([[a, b, i] for a, b in boundary], dtype=np.int64)
        tris = np.vstack([tris[~bad], new])

    tris = tris[(tris < n).all(axis=1)]
    tri_list = [tuple(int(v) for v in t) for t in tris]
    tri_list = _fill_hull_pockets(P, tri_list)
    tri_list = _lawson_flips(P, tri_list, tol)
    out = np.array(sorted(_canonical(t) for t in tri_list), dtype=np.int64)
    return out


def _fill_hull_pockets(P, tris):
    """Close concave boundary pockets so the triangulation covers the hull."""
    tris = list(tris)
    for _ in range(10 * len(P)):
        directed = {(t[k], t[(k + 1) % 3]) for t in tris for k in range(3)}
        nxt = {a: b for a, b in directed if (b, a) not in directed}
        added = False
        for a, b in sorted(nxt.items()):
            c = nxt.get(b)
            if c is None or c == a:
                continue
            if _orient(P[a], P[b], P[c]) >= 0:
                continue
            # reflex boundary vertex b: triangle (a, c, b) lies outside the mesh
            tri = np.array([P[a], P[c], P[b]])
            inside = False
            for q in range(len(P)):
                if q in (a, b, c):
                    continue
                if (_orient(tri[0], tri[1], P[q]) > 0 and _orient(tri[1], tri[2], P[q]) > 0
                        and _orient(tri[2], tri[0], P[q]) > 0):
                    inside = True
                    break
            if not inside:
                tris.append((a, c, b))
                added = True
                break
        if not added:
            return tris
    raise RuntimeError("hull repair did not converge")


def _lawson_flips(P, tris, tol):
    tris = [tuple(t) for t in tris]
    alive = [True] * len(tris)
    owner: dict[tuple[int, int], int] = {}
    for k, t in enumerate(tris):
        for j in range(3):
            owner[(t[j], t[(j + 1) % 3])] = k

    def third(t, a, b):
        return next(v for v in t if v != a and v != b)

    stack = sorted(owner)
    budget = 50 * len(P) + 1000
    while stack:
        a, b = stack.pop()
        k1 = owner.get((a, b))
        k2 = owner.get((b, a))
        if k1 is None or k2 is None or not alive[k1] or not alive[k2]:
            continue
        c = third(tris[k1], a, b)
        d = third(tris[k2], a, b)
        if _orient(P[c], P[a], P[d]) <= 0 or _orient(P[c], P[d], P[b]) <= 0:
            continue  # quad not strictly convex, flip impossible
        det = _incircle(P[a], P[b], P[c], P[d])
        if det > tol:
            flip = True
        elif det >= -tol:
            cur = min(tuple(sorted((a, b, c))), tuple(sorted((b, a, d))))
            alt = min(tuple(sorted((c, a, d))), tuple(sorted((c, d, b))))
            flip = alt < cur
        else:
            flip = False
        if not flip:
            continue
        budget -= 1
        if budget < 0:
            raise RuntimeError("edge flipping did not converge")
        alive[k1] = alive[k2] = False
        for e in ((a, b), (b, c), (c, a), (b, a), (a, d), (d, b)):
            owner.pop(e, None)
        for t in ((c, a, d), (c, d, b)):
            tris.append(t)
            alive.append(True)
            for j in range(3):
                owner[(t[j], t[(j + 1) % 3])] = len(tris) - 1
        stack.extend([(a, d), (d, b), (b, c), (c, a)])
    return [t for t, ok in zip(tris, alive) if ok]
