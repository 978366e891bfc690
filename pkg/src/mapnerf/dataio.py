"""On-disk formats: dataset directories, PPM/PFM images, checkpoints, configs.

Dataset directory layout::

    intrinsics.txt        fx fy cx cy width height
    poses.txt             <frame_id> + 12 numbers, row-major 3x4 world-from-camera
    images/FFFFFF.ppm     binary P6, 8 bit, top-left pixel first, RGB
    depth/FFFFFF.pfm      optional; little-endian 'Pf', meters, -1 = invalid
    map/heights.csv       header x,y,z
    map/lanes.txt         one polyline per line: n x1 y1 z1 ... xn yn zn
    split.txt             lines 'train <id>' or 'eval <id>'

Checkpoint layout (all little-endian)::

    offset 0    b"MNRF"
           4    u32 format version (1)
           8    6 x f64 bbox min xyz, max xyz
          56    3 x u32 node resolution nx ny nz
          68    f32 x N   raw density, x fastest then y then z
                f32 x 3N  raw color, RGB per node, same node order
                u64 step, f64 epsilon, u64 seed
                f64 x N, f64 x N, f64 x 3N, f64 x 3N
                          Adam first/second moments (density, then color)
                3 x f64   background color
"""

from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Camera
from .map_prior import HeightFieldMap, LaneVectors

__all__ = [
    "FormatError",
    "Dataset",
    "read_ppm",
    "write_ppm",
    "read_pfm",
    "write_pfm",
    "save_dataset",
    "load_dataset",
    "CheckpointState",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config",
    "format_config",
]

CHECKPOINT_MAGIC = b"MNRF"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; carries the path and the offending line or byte offset."""

    def __init__(self, path, message, *, line=None, offset=None):
        where = ""
        if line is not None:
            where = f" line {line}"
        elif offset is not None:
            where = f" at byte offset {offset}"
        super().__init__(f"{path}{where}: {message}")
        self.path = str(path)
        self.line = line
        self.offset = offset


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_bytes()


# --- images -----------------------------------------------------------------


def _header_tokens(data: bytes, path, n: int):
    """Read ``n`` whitespace-separated header tokens; return (tokens, data offset)."""
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated header", offset=pos)
        tokens.append(data[start:pos].decode("ascii", "replace"))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(path, "missing whitespace after header", offset=pos)
    return tokens, pos + 1


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM images must be (H, W, 3) uint8")
    h, w, _ = img.shape
    _atomic_write(Path(path), f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = _read_bytes(path)
    tokens, off = _header_tokens(data, path, 4)
    if tokens[0] != "P6":
        raise FormatError(path, f"expected P6 magic, got {tokens[0]!r}", offset=0)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError(path, "non-integer header field", offset=0) from None
    if maxval != 255:
        raise FormatError(path, f"only 8-bit PPM supported (maxval {maxval})", offset=0)
    need = w * h * 3
    if len(data) - off < need:
        raise FormatError(path, f"truncated pixel data ({len(data) - off} of {need} bytes)", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def write_pfm(path, array: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows are stored bottom-to-top."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    h, w = a.shape
    _atomic_write(Path(path), f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = _read_bytes(path)
    tokens, off = _header_tokens(data, path, 4)
    if tokens[0] != "Pf":
        raise FormatError(path, f"expected single-channel 'Pf', got {tokens[0]!r}", offset=0)
    w, h, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(data) - off < need:
        raise FormatError(path, "truncated float data", offset=len(data))
    a = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return a[::-1].astype(np.float32)


# --- dataset ------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    intrinsics: tuple  # fx, fy, cx, cy, width, height
    frame_ids: list
    poses: np.ndarray  # (N, 3, 4)
    images: np.ndarray  # (N, H, W, 3) uint8
    height_map: HeightFieldMap
    lanes: LaneVectors
    split: dict = field(default_factory=dict)  # frame id -> 'train' | 'eval'
    depths: Optional[np.ndarray] = None  # (N, H, W) float32, -1 invalid

    def __post_init__(self):
        self.frame_ids = [int(i) for i in self.frame_ids]
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if len(set(self.frame_ids)) != len(self.frame_ids):
            raise ValueError("duplicate frame ids")
        if len(self.poses) != len(self.frame_ids) or len(self.images) != len(self.frame_ids):
            raise ValueError("poses, images and frame ids must have equal length")
        unknown = set(self.split) - set(self.frame_ids)
        if unknown:
            raise ValueError(f"split references unknown frame ids {sorted(unknown)[:5]}")

    def index(self, frame_id: int) -> int:
        return self.frame_ids.index(int(frame_id))

    def camera(self, i: int) -> Camera:
        fx, fy, cx, cy, w, h = self.intrinsics
        return Camera(fx, fy, cx, cy, int(w), int(h), self.poses[i])

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64) / 255.0

    def ids_with(self, label: str) -> list:
        return [i for i in self.frame_ids if self.split.get(i) == label]

    @property
    def train_ids(self) -> list:
        return self.ids_with("train")

    @property
    def eval_ids(self) -> list:
        return self.ids_with("eval")


def _fmt(x) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    for sub in ("", "images", "map") + (("depth",) if ds.depths is not None else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)

    fx, fy, cx, cy, w, h = ds.intrinsics
    _atomic_write(out / "intrinsics.txt", f"{_fmt(fx)} {_fmt(fy)} {_fmt(cx)} {_fmt(cy)} {int(w)} {int(h)}\n".encode())
    lines = [" ".join([str(fid)] + [_fmt(x) for x in ds.poses[k].ravel()]) for k, fid in enumerate(ds.frame_ids)]
    _atomic_write(out / "poses.txt", ("\n".join(lines) + "\n").encode())
    for k, fid in enumerate(ds.frame_ids):
        write_ppm(out / "images" / f"{fid:06d}.ppm", ds.images[k])
        if ds.depths is not None:
            write_pfm(out / "depth" / f"{fid:06d}.pfm", ds.depths[k])
    rows = ["x,y,z"] + [",".join(_fmt(v) for v in node) for node in ds.height_map.nodes]
    _atomic_write(out / "map" / "heights.csv", ("\n".join(rows) + "\n").encode())
    lane_lines = [" ".join([str(len(p))] + [_fmt(v) for v in p.ravel()]) for p in ds.lanes]
    _atomic_write(out / "map" / "lanes.txt", ("\n".join(lane_lines) + "\n" if lane_lines else "").encode())
    split_lines = [f"{ds.split[fid]} {fid}" for fid in ds.frame_ids if fid in ds.split]
    _atomic_write(out / "split.txt", ("\n".join(split_lines) + "\n").encode())
    return out


def _text_lines(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_text().splitlines()


def _floats(path, lineno, tokens):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise FormatError(path, "expected decimal numbers", line=lineno) from None


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")

    p = d / "intrinsics.txt"
    lines = [ln for ln in _text_lines(p) if ln.strip()]
    if len(lines) != 1 or len(lines[0].split()) != 6:
        raise FormatError(p, "expected one line 'fx fy cx cy width height'", line=1)
    fx, fy, cx, cy, w, h = _floats(p, 1, lines[0].split())
    if w != int(w) or h != int(h):
        raise FormatError(p, "image size must be integral", line=1)
    intr = (fx, fy, cx, cy, int(w), int(h))

    p = d / "poses.txt"
    ids, poses = [], []
    for n, ln in enumerate(_text_lines(p), 1):
        tok = ln.split()
        if not tok:
            continue
        if len(tok) != 13:
            raise FormatError(p, f"expected frame id and 12 numbers, got {len(tok)} fields", line=n)
        try:
            ids.append(int(tok[0]))
        except ValueError:
            raise FormatError(p, f"bad frame id {tok[0]!r}", line=n) from None
        poses.append(np.array(_floats(p, n, tok[1:])).reshape(3, 4))

    images, depths = [], []
    has_depth = (d / "depth").is_dir()
    for fid in ids:
        img = read_ppm(d / "images" / f"{fid:06d}.ppm")
        if img.shape != (intr[5], intr[4], 3):
            raise FormatError(d / "images" / f"{fid:06d}.ppm", f"image shape {img.shape} does not match intrinsics", offset=0)
        images.append(img)
        if has_depth:
            depths.append(read_pfm(d / "depth" / f"{fid:06d}.pfm"))

    p = d / "map" / "heights.csv"
    lines = _text_lines(p)
    if not lines or lines[0].strip() != "x,y,z":
        raise FormatError(p, "missing 'x,y,z' header", line=1)
    nodes = [_floats(p, n, ln.split(",")) for n, ln in enumerate(lines[1:], 2) if ln.strip()]
    if any(len(r) != 3 for r in nodes):
        raise FormatError(p, "rows must have 3 columns", line=2 + next(i for i, r in enumerate(nodes) if len(r) != 3))
    nodes = np.array(nodes, dtype=np.float64).reshape(-1, 3)
    uniq = np.unique(np.round(np.diff(np.unique(nodes[:, 0])), 9)) if len(nodes) else []
    spacing = float(uniq[0]) if len(uniq) else 1.0

    p = d / "map" / "lanes.txt"
    polylines = []
    for n, ln in enumerate(_text_lines(p), 1):
        tok = ln.split()
        if not tok:
            continue
        vals = _floats(p, n, tok)
        k = int(vals[0])
        if k != vals[0] or len(vals) != 1 + 3 * k:
            raise FormatError(p, f"polyline declares {tok[0]} points but has {len(vals) - 1} numbers", line=n)
        polylines.append(np.array(vals[1:]).reshape(k, 3))

    p = d / "split.txt"
    split = {}
    if p.exists():
        for n, ln in enumerate(_text_lines(p), 1):
            tok = ln.split()
            if not tok:
                continue
            if len(tok) != 2 or tok[0] not in ("train", "eval"):
                raise FormatError(p, "expected 'train <id>' or 'eval <id>'", line=n)
            fid = int(tok[1])
            if fid not in ids:
                raise FormatError(p, f"frame id {fid} not in poses.txt", line=n)
            split[fid] = tok[0]

    return Dataset(
        intrinsics=intr,
        frame_ids=ids,
        poses=np.array(poses).reshape(-1, 3, 4),
        images=np.array(images, dtype=np.uint8).reshape(len(ids), intr[5], intr[4], 3),
        height_map=HeightFieldMap(nodes, spacing),
        lanes=LaneVectors(polylines),
        split=split,
        depths=np.array(depths, dtype=np.float32) if has_depth else None,
    )


# --- checkpoint -----------------------------------------------------------------


@dataclass(eq=False)
class CheckpointState:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: tuple
    density: np.ndarray  # (N,) raw, float32-representable
    color: np.ndarray  # (N, 3)
    background: np.ndarray
    step: int = 0
    epsilon: float = 0.0
    seed: int = 0
    m_density: Optional[np.ndarray] = None
    v_density: Optional[np.ndarray] = None
    m_color: Optional[np.ndarray] = None
    v_color: Optional[np.ndarray] = None


def save_checkpoint(path, ck: CheckpointState) -> None:
    n = int(np.prod(ck.resolution))
    zeros = np.zeros(n)
    zeros3 = np.zeros((n, 3))
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<6d", *np.asarray(ck.bbox_min, float), *np.asarray(ck.bbox_max, float)),
        struct.pack("<3I", *(int(r) for r in ck.resolution)),
        np.asarray(ck.density, dtype="<f4").reshape(n).tobytes(),
        np.asarray(ck.color, dtype="<f4").reshape(n, 3).tobytes(),
        struct.pack("<QdQ", int(ck.step), float(ck.epsilon), int(ck.seed)),
    ]
    for arr, z in ((ck.m_density, zeros), (ck.v_density, zeros), (ck.m_color, zeros3), (ck.v_color, zeros3)):
        parts.append(np.asarray(z if arr is None else arr, dtype="<f8").reshape(z.shape).tobytes())
    parts.append(struct.pack("<3d", *np.asarray(ck.background, float)))
    _atomic_write(Path(path), b"".join(parts))


def load_checkpoint(path) -> CheckpointState:
    data = _read_bytes(path)
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(path, f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    pos = 4

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError(path, f"truncated while reading {what}", offset=pos)
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}", offset=4)
    bbox = struct.unpack("<6d", take(48, "bbox"))
    res = struct.unpack("<3I", take(12, "resolution"))
    n = res[0] * res[1] * res[2]
    density = np.frombuffer(take(4 * n, "density grid"), dtype="<f4").astype(np.float64)
    color = np.frombuffer(take(12 * n, "color grid"), dtype="<f4").astype(np.float64).reshape(n, 3)
    step, eps, seed = struct.unpack("<QdQ", take(24, "train state"))
    m_d = np.frombuffer(take(8 * n, "density first moment"), dtype="<f8").copy()
    v_d = np.frombuffer(take(8 * n, "density second moment"), dtype="<f8").copy()
    m_c = np.frombuffer(take(24 * n, "color first moment"), dtype="<f8").reshape(n, 3).copy()
    v_c = np.frombuffer(take(24 * n, "color second moment"), dtype="<f8").reshape(n, 3).copy()
    bg = np.array(struct.unpack("<3d", take(24, "background")))
    if pos != len(data):
        raise FormatError(path, f"{len(data) - pos} trailing bytes", offset=pos)
    return CheckpointState(np.array(bbox[:3]), np.array(bbox[3:]), tuple(res), density, color, bg,
                           step, eps, seed, m_d, v_d, m_c, v_c)


# --- key = value configs -----------------------------------------------------------


def _convert(value: str, typ, key, path, lineno):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
        if origin is tuple:
            args = typing.get_args(typ)
            inner = args[0] if args else float
            parts = value.replace(",", " ").split()
            return tuple(inner(p) for p in parts)
    except ValueError:
        raise FormatError(path, f"bad value {value!r} for key {key!r}", line=lineno) from None
    raise TypeError(f"unsupported config field type {typ!r}")


def parse_config(source, cls, path="<config>", **overrides):
    """Parse flat ``key = value`` text (``#`` comments) into dataclass ``cls``.

    ``source`` is a path or the text itself when ``path`` is given explicitly.
    Unknown keys are errors.
    """
    if isinstance(source, (str, os.PathLike)) and path == "<config>":
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"no such config file: {path}")
        text = path.read_text()
    else:
        text = source
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(path, f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise FormatError(path, f"unknown key {key!r}", line=lineno)
        values[key] = _convert(value, hints[key], key, path, lineno)
    values.update(overrides)
    return cls(**values)


def format_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
