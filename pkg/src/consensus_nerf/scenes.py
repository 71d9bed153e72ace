"""Analytic ground-truth scenes, posed datasets and their on-disk format."""

from __future__ import annotations

import json
from dataclasses import astuple, dataclass, field, replace
from pathlib import Path

import numpy as np

from .netcore import ContractError
from .render import (CameraModel, RenderSettings, look_at, pixel_rays, read_ppm, render_image_fn,
                     write_ppm)


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class DatasetNotFoundError(DatasetError, FileNotFoundError):
    pass


class MalformedMetadataError(DatasetError, ValueError):
    pass


class MissingImageError(DatasetError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    sigma: float
    color: tuple

    def contains(self, pts):
        return np.sum((pts - np.asarray(self.center)) ** 2, axis=-1) <= self.radius ** 2

    def extent(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    sigma: float
    color: tuple

    def contains(self, pts):
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)), axis=-1)

    def extent(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    background: tuple = (0.0, 0.0, 0.0)
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    t_near: float = 1.5
    t_far: float = 4.5

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        for prim in self.primitives:
            if not (np.isfinite(prim.sigma) and prim.sigma > 0):
                raise ContractError(f"primitive density must be finite and positive: {prim}")
            plo, phi = prim.extent()
            if np.any(plo < lo - 1e-12) or np.any(phi > hi + 1e-12):
                raise ContractError(f"primitive {prim} extends outside the scene bounds")

    @property
    def settings(self) -> RenderSettings:
        return RenderSettings(self.t_near, self.t_far, tuple(self.background), self.bounds)


def analytic_query(scene: AnalyticScene, points):
    """Ground-truth ``(sigma, color)``; the first primitive containing a point wins."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    sigma = np.zeros(len(pts))
    color = np.broadcast_to(np.asarray(scene.background, dtype=float), pts.shape).copy()
    taken = np.zeros(len(pts), dtype=bool)
    for prim in scene.primitives:
        hit = prim.contains(pts) & ~taken
        sigma[hit] = prim.sigma
        color[hit] = prim.color
        taken |= hit
    if single:
        return float(sigma[0]), color[0]
    return sigma, color


def default_scene() -> AnalyticScene:
    """Two colored spheres and a box inside the unit cube."""
    return AnalyticScene(
        primitives=(
            Sphere((0.3, 0.25, 0.05), 0.35, 30.0, (0.9, 0.2, 0.15)),
            Sphere((-0.35, -0.3, 0.2), 0.25, 30.0, (0.15, 0.35, 0.9)),
            Box((-0.45, 0.05, -0.55), (0.05, 0.55, -0.15), 30.0, (0.2, 0.8, 0.3)),
        ),
        background=(0.0, 0.0, 0.0),
    )


def ring_cameras(n: int, radius: float = 3.0, elevation_deg: float = 25.0, azimuth_offset_deg: float = 0.0,
                 width: int = 64, height: int = 64, fov_deg: float = 45.0) -> list[CameraModel]:
    """``n`` cameras evenly spaced on a horizontal ring, all aimed at the origin."""
    cams = []
    el = np.radians(elevation_deg)
    for k in range(n):
        az = np.radians(azimuth_offset_deg) + 2 * np.pi * k / n
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(CameraModel.from_fov(width, height, fov_deg, look_at(eye)))
    return cams


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass(frozen=True)
class Frame:
    id: int
    pose: np.ndarray
    image: np.ndarray


@dataclass
class PosedDataset:
    intrinsics: Intrinsics
    frames: list = field(default_factory=list)
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    t_near: float = 1.5
    t_far: float = 4.5
    background: tuple = (0.0, 0.0, 0.0)

    def __len__(self):
        return len(self.frames)

    @property
    def settings(self) -> RenderSettings:
        return RenderSettings(self.t_near, self.t_far, tuple(self.background),
                              tuple(tuple(float(v) for v in b) for b in self.bounds))

    def camera(self, frame: Frame) -> CameraModel:
        k = self.intrinsics
        return CameraModel(k.width, k.height, k.fx, k.fy, k.cx, k.cy, frame.pose)

    def cameras(self) -> list[CameraModel]:
        return [self.camera(f) for f in self.frames]

    def with_frames(self, frames) -> "PosedDataset":
        return replace(self, frames=list(frames))

    def raw_bytes(self) -> int:
        """Size of all images as float32 RGB tensors (the centralized transfer cost)."""
        k = self.intrinsics
        return len(self.frames) * k.width * k.height * 3 * 4

    def ray_table(self):
        """Flattened per-pixel ``(origins, dirs, colors)`` over all frames, frame-major."""
        origins, dirs, colors = [], [], []
        for frame in self.frames:
            o, d = pixel_rays(self.camera(frame))
            origins.append(o)
            dirs.append(d)
            colors.append(frame.image.reshape(-1, 3))
        return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors)


def _frame_seed(seed: int, frame_id: int) -> int:
    return int(np.random.SeedSequence([seed, frame_id]).generate_state(1)[0])


def generate_dataset(scene: AnalyticScene, cameras, samples_per_ray: int = 256, seed: int = 0,
                     first_id: int = 0) -> PosedDataset:
    """Render ``cameras`` through the analytic field with the training quadrature."""
    if not cameras:
        raise ContractError("need at least one camera")
    c0 = cameras[0]
    intr = Intrinsics(c0.width, c0.height, c0.fx, c0.fy, c0.cx, c0.cy)

    def query(points, dirs):
        return analytic_query(scene, points)

    frames = []
    for i, cam in enumerate(cameras):
        if (cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy) != astuple(intr):
            raise ContractError("all cameras in a dataset must share intrinsics")
        fid = first_id + i
        img = render_image_fn(query, cam, samples_per_ray, _frame_seed(seed, fid), scene.settings)
        frames.append(Frame(fid, cam.pose, np.clip(img, 0, 1)))
    return PosedDataset(intr, frames, scene.bounds, scene.t_near, scene.t_far, tuple(scene.background))


def partition_dataset(ds: PosedDataset, n_agents: int, strategy: str = "contiguous") -> list[PosedDataset]:
    """Split frames into ``n_agents`` disjoint shards whose sizes differ by at most one.

    ``contiguous`` hands each agent a run of consecutive frames (one region of
    a trajectory); ``round_robin`` deals frames out in turn. Leftover frames
    go one apiece to the lowest-numbered agents.
    """
    n = len(ds.frames)
    if n_agents < 1:
        raise ContractError("n_agents must be >= 1")
    if n_agents > n:
        raise ContractError(f"{n_agents} agents but only {n} frames: some agent would hold no data")
    if strategy == "contiguous":
        base, extra = divmod(n, n_agents)
        shards, start = [], 0
        for a in range(n_agents):
            size = base + (1 if a < extra else 0)
            shards.append(ds.frames[start:start + size])
            start += size
    elif strategy == "round_robin":
        shards = [ds.frames[a::n_agents] for a in range(n_agents)]
    else:
        raise ContractError(f"unknown partition strategy {strategy!r}")
    return [ds.with_frames(s) for s in shards]


def save_dataset(ds: PosedDataset, directory) -> Path:
    """Write ``meta.json`` plus one PPM per frame."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    k = ds.intrinsics
    meta = {
        "intrinsics": {"width": k.width, "height": k.height, "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "t_near": ds.t_near,
        "t_far": ds.t_far,
        "background": list(ds.background),
        "bounds": [list(map(float, b)) for b in ds.bounds],
        "frames": [],
    }
    for f in ds.frames:
        name = f"frame_{f.id:04d}.ppm"
        write_ppm(d / name, f.image)
        meta["frames"].append({"id": f.id, "file": name, "pose": [float(v) for v in np.ravel(f.pose)]})
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return d


def load_dataset(directory) -> PosedDataset:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise DatasetNotFoundError(f"no meta.json in {d}")
    try:
        meta = json.loads(meta_path.read_text())
        k = meta["intrinsics"]
        intr = Intrinsics(int(k["width"]), int(k["height"]), float(k["fx"]), float(k["fy"]),
                          float(k["cx"]), float(k["cy"]))
        entries = [(int(f["id"]), f["file"], np.array(f["pose"], dtype=float).reshape(4, 4))
                   for f in meta["frames"]]
        bounds = tuple(tuple(float(v) for v in b) for b in meta["bounds"])
        t_near, t_far = float(meta["t_near"]), float(meta["t_far"])
        background = tuple(float(v) for v in meta["background"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedMetadataError(f"{meta_path}: {exc}") from None
    frames = []
    for fid, name, pose in entries:
        path = d / name
        if not path.is_file():
            raise MissingImageError(f"{path} referenced by meta.json does not exist")
        img = read_ppm(path)
        if img.shape != (intr.height, intr.width, 3):
            raise MalformedMetadataError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, "
                                         f"expected {intr.width}x{intr.height}")
        frames.append(Frame(fid, pose, img))
    return PosedDataset(intr, frames, bounds, t_near, t_far, background)


# Blender stores OpenGL-style poses (camera looks down -z, y up); flip to +z forward, y down.
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def load_blender_transforms(path, split: str = "train", background=(1.0, 1.0, 1.0),
                            t_near: float = 2.0, t_far: float = 6.0, half_extent: float = 1.5) -> PosedDataset:
    """Load a Blender-synthetic ``transforms_<split>.json`` and its PNG frames.

    ``path`` may be the scene directory or the JSON file itself. RGBA images are
    composited over ``background``.
    """
    from PIL import Image

    p = Path(path)
    json_path = p / f"transforms_{split}.json" if p.is_dir() else p
    if not json_path.is_file():
        raise DatasetNotFoundError(f"{json_path} does not exist")
    root = json_path.parent
    try:
        meta = json.loads(json_path.read_text())
        angle = float(meta["camera_angle_x"])
        entries = [(f["file_path"], np.array(f["transform_matrix"], dtype=float).reshape(4, 4))
                   for f in meta["frames"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedMetadataError(f"{json_path}: {exc}") from None

    bg = np.asarray(background, dtype=float)
    frames, size = [], None
    for i, (rel, c2w) in enumerate(entries):
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.is_file():
            raise MissingImageError(f"{img_path} referenced by {json_path.name} does not exist")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
        rgb = arr[..., :3] * arr[..., 3:] + bg * (1 - arr[..., 3:])
        if size is None:
            size = rgb.shape[:2]
        elif rgb.shape[:2] != size:
            raise MalformedMetadataError(f"{img_path}: frame size differs from the first frame")
        pose = c2w @ _GL_TO_CV
        frames.append(Frame(i, pose, rgb))
    if size is None:
        raise MalformedMetadataError(f"{json_path}: no frames")
    h, w = size
    focal = 0.5 * w / np.tan(0.5 * angle)
    intr = Intrinsics(w, h, focal, focal, w / 2, h / 2)
    bounds = ((-half_extent,) * 3, (half_extent,) * 3)
    return PosedDataset(intr, frames, bounds, t_near, t_far, tuple(bg))
