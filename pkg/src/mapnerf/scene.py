"""Procedural driving scenes, ground-truth rendering, trajectories and map extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataio import Dataset, save_dataset
from .geometry import Camera, TriangleMesh, look_at_pose
from .map_prior import HeightFieldMap, LaneVectors

__all__ = [
    "SceneConfig",
    "Box",
    "SceneSpec",
    "Trajectory",
    "MapNoise",
    "generate_scene",
    "render_gt",
    "make_trajectories",
    "extract_map",
    "export_sequence",
    "holdout_ids",
    "build_scene_datasets",
]

# frame-id offsets keeping ids unique across the three exported trajectories
PARALLEL_ID_OFFSET = 100_000
LANE_CHANGE_ID_OFFSET = 200_000


@dataclass
class SceneConfig:
    length: float = 40.0
    width: float = 12.0
    n_lanes: int = 2
    lane_width: float = 3.0
    shoulder: float = 0.5
    stripe_width: float = 0.3
    n_obstacles: int = 3
    ground_amplitude: float = 0.35
    ground_mesh_spacing: float = 0.25
    sky_color: tuple[float, ...] = (0.62, 0.76, 0.95)
    image_width: int = 64
    image_height: int = 64
    focal: float = 40.0
    n_frames: int = 50
    frame_spacing: float = 0.5
    start_x: float = 2.0
    camera_height: float = 1.5
    pitch_deg: float = 8.0
    change_frames: int = 50
    map_grid_spacing: float = 1.0
    height_sigma: float = 0.1
    lane_sigma: float = 0.05
    eval_every: int = 9
    eval_offset: int = 0

    def validate(self):
        if self.length <= 0 or self.width <= 0 or self.lane_width <= 0:
            raise ValueError("scene extents must be positive")
        if self.n_lanes < 2:
            raise ValueError("scene needs at least 2 lanes")
        if self.n_obstacles < 0:
            raise ValueError("obstacle count must be non-negative")
        if self.n_lanes * self.lane_width + 2 * self.shoulder >= self.width:
            raise ValueError("road does not fit inside the scene width")
        if self.ground_amplitude < 0 or self.ground_amplitude > 0.5:
            raise ValueError("ground amplitude must lie in [0, 0.5]")


@dataclass(frozen=True, eq=False)
class Box:
    center: np.ndarray  # (x, y) of the footprint center
    size: np.ndarray  # (sx, sy, sz)
    base: float  # z of the bottom face
    albedo: np.ndarray

    def triangles(self):
        x0, y0 = self.center - 0.5 * self.size[:2]
        x1, y1 = self.center + 0.5 * self.size[:2]
        z0, z1 = self.base, self.base + self.size[2]
        v = np.array([[x, y, z] for z in (z0, z1) for y in (y0, y1) for x in (x0, x1)], dtype=np.float64)
        f = np.array([
            [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],  # bottom, top
            [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],  # y0, y1
            [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],  # x0, x1
        ])
        return v, f


@dataclass(frozen=True, eq=False)
class SceneSpec:
    config: SceneConfig
    seed: int
    amplitudes: np.ndarray
    wavenumbers: np.ndarray  # (2, 2) per-sinusoid (kx, ky), radians per meter
    phases: np.ndarray
    texture: np.ndarray  # (2, gy, gx) value-noise lattices, road and verge
    obstacles: tuple
    lanes: LaneVectors
    sky_color: np.ndarray
    mesh: TriangleMesh = field(repr=False)
    material: np.ndarray = field(repr=False)  # per triangle: -1 ground, k obstacle k

    def ground_height(self, x, y):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        z = np.zeros(np.broadcast(x, y).shape)
        for a, (kx, ky), ph in zip(self.amplitudes, self.wavenumbers, self.phases):
            z = z + a * np.sin(kx * x + ky * y + ph)
        return z

    def lane_boundaries(self) -> np.ndarray:
        c = self.config
        return (np.arange(c.n_lanes + 1) - 0.5 * c.n_lanes) * c.lane_width

    def lane_centers(self) -> np.ndarray:
        b = self.lane_boundaries()
        return 0.5 * (b[:-1] + b[1:])

    def _noise(self, lattice, x, y, cell):
        gy, gx = lattice.shape
        u = np.clip(x / cell, 0, gx - 1.000001)
        v = np.clip((y + 0.5 * self.config.width) / cell, 0, gy - 1.000001)
        i, j = np.floor(u).astype(int), np.floor(v).astype(int)
        fu, fv = u - i, v - j
        fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
        a = lattice[j, i] * (1 - fu) + lattice[j, i + 1] * fu
        b = lattice[j + 1, i] * (1 - fu) + lattice[j + 1, i + 1] * fu
        return a * (1 - fv) + b * fv

    def albedo(self, x, y) -> np.ndarray:
        """Unlit ground albedo at world (x, y); shape (..., 3)."""
        c = self.config
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        road_n = self._noise(self.texture[0], x, y, 2.0)
        verge_n = self._noise(self.texture[1], x, y, 2.0)
        asphalt = np.stack([0.30 + 0.16 * road_n, 0.30 + 0.16 * road_n, 0.33 + 0.14 * road_n], axis=-1)
        verge = np.stack([0.22 + 0.18 * verge_n, 0.40 + 0.20 * verge_n, 0.16 + 0.08 * verge_n], axis=-1)
        half = 0.5 * c.n_lanes * c.lane_width + c.shoulder
        out = np.where((np.abs(y) <= half)[..., None], asphalt, verge)
        bounds = self.lane_boundaries()
        for k, yb in enumerate(bounds):
            on = np.abs(y - yb) <= 0.5 * c.stripe_width
            if 0 < k < len(bounds) - 1:
                on &= np.mod(x, 4.0) < 2.0  # dashed interior marking
            paint = (0.95, 0.93, 0.85) if k in (0, len(bounds) - 1) else (0.95, 0.80, 0.25)
            out = np.where(on[..., None], np.array(paint), out)
        return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    cameras: list
    label: str  # train-lane | parallel-lane | lane-change

    def __len__(self):
        return len(self.cameras)

    @property
    def positions(self) -> np.ndarray:
        return np.array([c.position for c in self.cameras])


@dataclass
class MapNoise:
    height_sigma: float = 0.1
    grid_spacing: float = 1.0
    lane_sigma: float = 0.05


def _ground_mesh(scene_params, cfg: SceneConfig):
    nx = int(round(cfg.length / cfg.ground_mesh_spacing)) + 1
    ny = int(round(cfg.width / cfg.ground_mesh_spacing)) + 1
    xs = np.linspace(0.0, cfg.length, nx)
    ys = np.linspace(-0.5 * cfg.width, 0.5 * cfg.width, ny)
    X, Y = np.meshgrid(xs, ys)
    Z = scene_params(X, Y)
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return verts, tris


def generate_scene(config: Optional[SceneConfig] = None, seed: int = 0) -> SceneSpec:
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)

    amp_split = rng.uniform(0.5, 0.7)
    amplitudes = cfg.ground_amplitude * np.array([amp_split, 1.0 - amp_split])
    wavelengths = np.array([rng.uniform(20.0, 32.0), rng.uniform(16.0, 26.0)])
    angle = rng.uniform(0.4, 1.1)
    dirs = np.array([[1.0, 0.0], [np.cos(angle), np.sin(angle)]])
    wavenumbers = 2 * np.pi * dirs / wavelengths[:, None]
    phases = rng.uniform(0, 2 * np.pi, size=2)
    gx = int(np.ceil(cfg.length / 2.0)) + 2
    gy = int(np.ceil(cfg.width / 2.0)) + 2
    texture = rng.random((2, gy, gx))

    def height(x, y):
        z = np.zeros(np.broadcast(x, y).shape)
        for a, (kx, ky), ph in zip(amplitudes, wavenumbers, phases):
            z = z + a * np.sin(kx * x + ky * y + ph)
        return z

    road_half = 0.5 * cfg.n_lanes * cfg.lane_width + cfg.shoulder
    obstacles = []
    attempts = 0
    while len(obstacles) < cfg.n_obstacles:
        attempts += 1
        if attempts > 10_000:
            raise ValueError("could not place obstacles without overlap")
        size = np.array([rng.uniform(1.0, 2.5), rng.uniform(0.8, 1.4), rng.uniform(1.0, 2.4)])
        side = rng.choice([-1.0, 1.0])
        lo = road_half + 0.3 + 0.5 * size[1]
        hi = 0.5 * cfg.width - 0.1 - 0.5 * size[1]
        if hi < lo:
            raise ValueError("scene too narrow for roadside obstacles")
        center = np.array([rng.uniform(6.0, cfg.length - 2.0), side * rng.uniform(lo, hi)])
        if any(np.all(np.abs(center - o.center) < 0.5 * (size[:2] + o.size[:2]) + 0.5) for o in obstacles):
            continue
        albedo = rng.uniform(0.1, 0.9, size=3)
        albedo[rng.integers(3)] = rng.uniform(0.75, 0.95)
        obstacles.append(Box(center, size, float(height(center[0], center[1])), albedo))

    xs = np.arange(0.0, cfg.length + 1e-9, 1.0)
    bounds = (np.arange(cfg.n_lanes + 1) - 0.5 * cfg.n_lanes) * cfg.lane_width
    lanes = LaneVectors([np.stack([xs, np.full_like(xs, yb), height(xs, yb)], axis=-1) for yb in bounds])

    verts, tris = _ground_mesh(height, cfg)
    material = [np.full(len(tris), -1)]
    all_v, all_f = [verts], [tris]
    offset = len(verts)
    for k, box in enumerate(obstacles):
        v, f = box.triangles()
        all_v.append(v)
        all_f.append(f + offset)
        material.append(np.full(len(f), k))
        offset += len(v)
    mesh = TriangleMesh(np.concatenate(all_v), np.concatenate(all_f))

    return SceneSpec(
        config=cfg, seed=seed, amplitudes=amplitudes, wavenumbers=wavenumbers, phases=phases,
        texture=texture, obstacles=tuple(obstacles), lanes=lanes,
        sky_color=np.asarray(cfg.sky_color, dtype=np.float64), mesh=mesh,
        material=np.concatenate(material),
    )


def render_gt(scene: SceneSpec, camera: Camera):
    """Unlit render: (image (H, W, 3) in [0, 1], depth (H, W), valid (H, W))."""
    origins, dirs = camera.pixel_rays()
    t, ids, _ = scene.mesh.intersect(origins, dirs, 0.0, np.inf)
    valid = ids >= 0
    img = np.broadcast_to(scene.sky_color, dirs.shape).copy()
    mat = np.where(valid, scene.material[np.maximum(ids, 0)], -2)
    ground = mat == -1
    if ground.any():
        p = origins[ground] + t[ground, None] * dirs[ground]
        img[ground] = scene.albedo(p[:, 0], p[:, 1])
    for k, box in enumerate(scene.obstacles):
        img[mat == k] = box.albedo
    shape = (camera.height, camera.width)
    depth = np.where(valid, t, np.nan)
    return img.reshape(shape + (3,)), depth.reshape(shape), valid.reshape(shape)


def _lane_camera(scene: SceneSpec, x: float, y: float) -> Camera:
    c = scene.config
    z = float(scene.ground_height(x, y)) + c.camera_height
    pitch = np.deg2rad(c.pitch_deg)
    pose = look_at_pose([x, y, z], [np.cos(pitch), 0.0, -np.sin(pitch)])
    return Camera(c.focal, c.focal, 0.5 * c.image_width, 0.5 * c.image_height,
                  c.image_width, c.image_height, pose)


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def make_trajectories(scene: SceneSpec, config: Optional[SceneConfig] = None) -> dict:
    """Train lane (lane 1), parallel lane (lane 2) and a lane-1 -> lane-2 change.

    The lane change has ``change_frames`` frames on the same x spacing, starting
    at the first train pose and ending on lane 2 at frame index
    ``change_frames - 1``.
    """
    c = config or scene.config
    centers = scene.lane_centers()
    if len(centers) < 2:
        raise ValueError("lane-change trajectories need at least 2 lanes")
    y1, y2 = float(centers[0]), float(centers[1])
    xs = c.start_x + c.frame_spacing * np.arange(c.n_frames)
    train = Trajectory([_lane_camera(scene, x, y1) for x in xs], "train-lane")
    parallel = Trajectory([_lane_camera(scene, x, y2) for x in xs], "parallel-lane")
    n = c.change_frames
    s = _smoothstep(np.arange(n) / max(n - 1, 1))
    xc = c.start_x + c.frame_spacing * np.arange(n)
    change = Trajectory([_lane_camera(scene, x, y1 + (y2 - y1) * si) for x, si in zip(xc, s)], "lane-change")
    return {"train": train, "parallel": parallel, "lane_change": change}


def extract_map(scene: SceneSpec, noise: Optional[MapNoise] = None, seed: int = 0):
    """Coarse noisy height map on a regular grid plus perturbed lane polylines."""
    noise = noise or MapNoise()
    if not noise.grid_spacing > 0:
        raise ValueError("grid spacing must be positive")
    c = scene.config
    rng = np.random.default_rng(seed)
    nx = int(np.floor(c.length / noise.grid_spacing + 1e-9)) + 1
    ny = int(np.floor(c.width / noise.grid_spacing + 1e-9)) + 1
    xs = np.arange(nx) * noise.grid_spacing
    ys = -0.5 * c.width + np.arange(ny) * noise.grid_spacing
    X, Y = np.meshgrid(xs, ys)
    Z = scene.ground_height(X, Y)
    if noise.height_sigma > 0:
        Z = Z + rng.normal(0.0, noise.height_sigma, size=Z.shape)
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
    lanes = []
    for line in scene.lanes:
        p = line.copy()
        if noise.lane_sigma > 0:
            p = p + rng.normal(0.0, noise.lane_sigma, size=p.shape)
        lanes.append(p)
    return HeightFieldMap(nodes, noise.grid_spacing), LaneVectors(lanes)


def holdout_ids(frame_ids, every: int = 9, offset: int = 0) -> list:
    """Every ``every``-th frame id (by position) starting at ``offset``."""
    return [fid for k, fid in enumerate(frame_ids) if k >= offset and (k - offset) % every == 0]


def export_sequence(scene: SceneSpec, trajectory: Trajectory, height_map: HeightFieldMap, lanes: LaneVectors,
                    out_dir, frame_ids=None, split=None) -> Path:
    out = Path(out_dir)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"output parent directory does not exist: {out.parent}")
    ids = list(range(len(trajectory))) if frame_ids is None else [int(i) for i in frame_ids]
    images, depths, poses = [], [], []
    for cam in trajectory.cameras:
        img, depth, valid = render_gt(scene, cam)
        images.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
        depths.append(np.where(valid, depth, -1.0).astype(np.float32))
        poses.append(cam.pose)
    cam0 = trajectory.cameras[0]
    ds = Dataset(
        intrinsics=(cam0.fx, cam0.fy, cam0.cx, cam0.cy, cam0.width, cam0.height),
        frame_ids=ids, poses=np.array(poses), images=np.array(images),
        height_map=height_map, lanes=lanes,
        split=dict(split) if split is not None else {i: "eval" for i in ids},
        depths=np.array(depths),
    )
    return save_dataset(ds, out)


def build_scene_datasets(config: SceneConfig, seed: int, out_dir) -> dict:
    """Generate a scene and export the train / parallel / lane-change datasets.

    Layout: ``out_dir/train`` (every ``eval_every``-th frame marked eval),
    ``out_dir/parallel`` and ``out_dir/lane_change`` (all frames eval).
    """
    out = Path(out_dir)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"output parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    scene = generate_scene(config, seed)
    trajs = make_trajectories(scene)
    hmap, lanes = extract_map(scene, MapNoise(config.height_sigma, config.map_grid_spacing, config.lane_sigma),
                              seed + 1)
    train_ids = list(range(len(trajs["train"])))
    held = set(holdout_ids(train_ids, config.eval_every, config.eval_offset))
    paths = {
        "train": export_sequence(scene, trajs["train"], hmap, lanes, out / "train", train_ids,
                                 {i: ("eval" if i in held else "train") for i in train_ids}),
        "parallel": export_sequence(scene, trajs["parallel"], hmap, lanes, out / "parallel",
                                    [PARALLEL_ID_OFFSET + i for i in range(len(trajs["parallel"]))]),
        "lane_change": export_sequence(scene, trajs["lane_change"], hmap, lanes, out / "lane_change",
                                       [LANE_CHANGE_ID_OFFSET + i for i in range(len(trajs["lane_change"]))]),
    }
    return paths
