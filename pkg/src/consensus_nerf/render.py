"""Pinhole rays, stratified sampling, quadrature volume rendering and the
photometric loss, each with the reverse pass needed for training."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import EncodingConfig, field_query
from .netcore import ContractError, MlpArchitecture


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``pose`` is camera-to-world; the camera looks down +z,
    x to the right, y down the image."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ContractError(f"pose must be 4x4, got {pose.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be positive")
        R = pose[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ContractError("pose rotation block is not a proper rotation")
        object.__setattr__(self, "pose", pose)

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float, pose) -> "CameraModel":
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return cls(width, height, f, f, width / 2, height / 2, pose)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.dir) - 1) > 1e-9:
            raise ContractError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise ContractError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")


def generate_ray(cam: CameraModel, u: int, v: int, t_near: float = 0.0, t_far: float = 1.0) -> Ray:
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ContractError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    origins, dirs = pixel_rays(cam, np.array([v * cam.width + u]))
    return Ray(origins[0], dirs[0], float(t_near), float(t_far))


def pixel_rays(cam: CameraModel, pixel_ids=None):
    """World-space ray origins and unit directions for flat pixel indices
    (``v * width + u``); all pixels when ``pixel_ids`` is None."""
    if pixel_ids is None:
        pixel_ids = np.arange(cam.n_pixels)
    pixel_ids = np.asarray(pixel_ids)
    u = pixel_ids % cam.width
    v = pixel_ids // cam.width
    cam_dirs = np.stack([(u + 0.5 - cam.cx) / cam.fx,
                         (v + 0.5 - cam.cy) / cam.fy,
                         np.ones(u.shape)], axis=-1)
    dirs = cam_dirs @ cam.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.pose[:3, 3], dirs.shape).copy()
    return origins, dirs


def stratified_t(n_rays: int, n: int, t_near, t_far, rng: np.random.Generator) -> np.ndarray:
    """``(n_rays, n)`` t-values, one uniform draw in each of ``n`` equal bins."""
    if n < 1:
        raise ContractError("need at least one sample per ray")
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))[:, None]
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))[:, None]
    bins = np.arange(n, dtype=np.float64)
    return t_near + (t_far - t_near) * (bins + rng.random((n_rays, n))) / n


def stratified_samples(ray: Ray, n: int, rng: np.random.Generator) -> np.ndarray:
    return stratified_t(1, n, ray.t_near, ray.t_far, rng)[0]


def pixel_rng(seed: int, pixel: int) -> np.random.Generator:
    return np.random.default_rng([seed, pixel])


def pixel_stratified_t(seed: int, pixel_ids, n: int, t_near: float, t_far: float) -> np.ndarray:
    """Stratified t-values where each pixel draws from its own ``(seed, pixel)`` stream."""
    rows = [stratified_t(1, n, t_near, t_far, pixel_rng(seed, int(p)))[0] for p in pixel_ids]
    return np.array(rows).reshape(len(rows), n)


class Composite:
    """Quadrature of the volume-rendering integral for a batch of rays."""

    def __init__(self, sigma, rgb, t, t_far, background=None):
        sigma = np.asarray(sigma)
        t = np.asarray(t, dtype=sigma.dtype)
        if sigma.ndim != 2 or t.shape != sigma.shape or rgb.shape != sigma.shape + (3,):
            raise ContractError("sigma/t must be (R, S) and rgb (R, S, 3)")
        if np.any(np.diff(t, axis=1) < 0):
            raise ContractError("t-values must be sorted along each ray")
        t_far = np.broadcast_to(np.asarray(t_far, dtype=t.dtype), (t.shape[0],))
        if np.any(t_far < t[:, -1]):
            raise ContractError("t_far lies before the last sample")
        bg = np.zeros(3, dtype=sigma.dtype) if background is None else np.asarray(background, dtype=sigma.dtype)

        self.delta = np.concatenate([np.diff(t, axis=1), (t_far - t[:, -1])[:, None]], axis=1)
        s = sigma * self.delta
        excl = np.concatenate([np.zeros_like(s[:, :1]), np.cumsum(s[:, :-1], axis=1)], axis=1)
        self.transmittance = np.exp(-excl)
        alpha = -np.expm1(-s)
        self.weights = self.transmittance * alpha
        self._t_next = self.transmittance * np.exp(-s)
        self.residual = self._t_next[:, -1]
        self.rgb = rgb
        self.background = bg
        self.color = np.einsum("rs,rsc->rc", self.weights, rgb) + self.residual[:, None] * bg

    def backward(self, d_color: np.ndarray):
        """Gradients ``(d_sigma, d_rgb)`` of ``<color, d_color>``."""
        gc = np.einsum("rsc,rc->rs", self.rgb, d_color)
        wc = self.weights * gc
        tail = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
        tail = tail + (self.residual * (d_color @ self.background))[:, None]
        d_sigma = (self._t_next * gc - tail) * self.delta
        d_rgb = self.weights[..., None] * d_color[:, None, :]
        return d_sigma, d_rgb


def render_ray(sigma, color, t, t_far, background=None):
    """Composite one ray. Returns ``(rgb, weights, transmittances)``."""
    comp = Composite(np.asarray(sigma, dtype=np.float64)[None], np.asarray(color, dtype=np.float64)[None],
                     np.asarray(t, dtype=np.float64)[None], t_far, background)
    return comp.color[0], comp.weights[0], comp.transmittance[0]


def image_loss_and_grad(predicted, gt):
    """Summed squared error over the batch and its gradient w.r.t. ``predicted``."""
    predicted, gt = np.asarray(predicted), np.asarray(gt)
    if predicted.shape != gt.shape:
        raise ContractError(f"shape mismatch {predicted.shape} vs {gt.shape}")
    diff = predicted - gt
    return float(np.sum(diff * diff)), 2 * diff


def sample_points(origins, dirs, t):
    return origins[:, None, :] + t[..., None] * dirs[:, None, :]


@dataclass(frozen=True)
class RenderSettings:
    """Scene-level constants shared by every render of one dataset."""

    t_near: float
    t_far: float
    background: tuple = (0.0, 0.0, 0.0)
    bounds: tuple | None = None


def nerf_query_fn(weights, arch: MlpArchitecture, enc: EncodingConfig, bounds=None):
    def query(points, dirs):
        fp = field_query(weights, arch, enc, points, dirs, bounds)
        return fp.sigma, fp.color
    return query


def render_rays(query_fn, origins, dirs, t, t_far, background=None):
    R, S = t.shape
    pts = sample_points(origins, dirs, t).reshape(-1, 3)
    sigma, color = query_fn(pts, np.repeat(dirs, S, axis=0))
    comp = Composite(sigma.reshape(R, S), color.reshape(R, S, 3), t, t_far, background)
    return comp.color


def render_loss_and_grad(weights, arch, enc, origins, dirs, t, gt, settings: RenderSettings):
    """Forward render a ray batch, score it against ``gt`` and backpropagate.

    Returns ``(loss, grad, predicted_colors)``.
    """
    R, S = t.shape
    pts = sample_points(origins, dirs, t).reshape(-1, 3)
    fp = field_query(weights, arch, enc, pts, np.repeat(dirs, S, axis=0), settings.bounds)
    comp = Composite(fp.sigma.reshape(R, S), fp.color.reshape(R, S, 3), t.astype(weights.dtype),
                     settings.t_far, settings.background)
    loss, g = image_loss_and_grad(comp.color, np.asarray(gt, dtype=weights.dtype))
    d_sigma, d_rgb = comp.backward(g)
    grad = fp.backward(d_sigma.reshape(-1), d_rgb.reshape(-1, 3))
    return loss, grad, comp.color


def render_image_fn(query_fn, cam: CameraModel, samples_per_ray: int, seed: int,
                    settings: RenderSettings, chunk: int = 1024, pixel_ids=None) -> np.ndarray:
    """Render every pixel (or ``pixel_ids``) of ``cam`` through ``query_fn``.

    Each pixel draws its sample offsets from its own ``(seed, pixel)`` stream,
    so the result does not depend on ``chunk``.
    """
    ids = np.arange(cam.n_pixels) if pixel_ids is None else np.asarray(pixel_ids)
    out = np.empty((ids.size, 3))
    for start in range(0, ids.size, chunk):
        part = ids[start:start + chunk]
        origins, dirs = pixel_rays(cam, part)
        t = pixel_stratified_t(seed, part, samples_per_ray, settings.t_near, settings.t_far)
        out[start:start + chunk] = render_rays(query_fn, origins, dirs, t, settings.t_far, settings.background)
    if pixel_ids is None:
        return out.reshape(cam.height, cam.width, 3)
    return out


def render_image(weights, arch, enc, cam: CameraModel, samples_per_ray: int, seed: int,
                 settings: RenderSettings, chunk: int = 1024) -> np.ndarray:
    return render_image_fn(nerf_query_fn(weights, arch, enc, settings.bounds), cam, samples_per_ray,
                           seed, settings, chunk)


def write_ppm(path, image: np.ndarray):
    """Binary P6, maxval 255, rows top to bottom."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected (H, W, 3) image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


_PPM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([^\s#]+)")


def read_ppm(path) -> np.ndarray:
    """Read a P6 image as floats in ``[0, 1]``."""
    data = Path(path).read_bytes()
    pos, tokens = 0, []
    while len(tokens) < 4:
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
