"""Positional encoding and the radiance-field query built on :mod:`netcore`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import ContractError, MlpArchitecture, mlp_backward, mlp_forward


@dataclass(frozen=True)
class EncodingConfig:
    E_pos: int = 6
    E_dir: int = 4
    include_identity: bool = True

    def __post_init__(self):
        if self.E_pos < 1:
            raise ContractError(f"E_pos must be >= 1, got {self.E_pos}")
        if self.E_dir < 0:
            raise ContractError(f"E_dir must be >= 0, got {self.E_dir}")
        if self.E_dir == 0 and not self.include_identity:
            raise ContractError("E_dir = 0 without identity leaves no direction input")

    @property
    def pos_dim(self) -> int:
        return encoded_length(self.E_pos, self.include_identity)

    @property
    def dir_dim(self) -> int:
        return encoded_length(self.E_dir, self.include_identity)


def encoded_length(E: int, include_identity: bool = True) -> int:
    return 3 * 2 * E + (3 if include_identity else 0)


def make_arch(enc: EncodingConfig, width: int = 64, hidden_layers: int = 8,
              skip_after_layer: int = 5, density_activation: str = "relu") -> MlpArchitecture:
    return MlpArchitecture(hidden_layers=hidden_layers, width=width, skip_after_layer=skip_after_layer,
                           pos_enc_dim=enc.pos_dim, dir_enc_dim=enc.dir_dim,
                           density_activation=density_activation)


def positional_encode(x, E: int, include_identity: bool = True) -> np.ndarray:
    """Sinusoidal lift of 3-vectors, applied per coordinate.

    For each coordinate ``x_k`` emits ``sin(2^0 x_k), cos(2^0 x_k), ...,
    sin(2^(E-1) x_k), cos(2^(E-1) x_k)``; coordinates are laid out one after
    another, optionally preceded by ``x`` itself. Accepts ``(3,)`` or ``(N, 3)``.
    """
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    freqs = (2.0 ** np.arange(E)).astype(pts.dtype)
    angles = pts[:, :, None] * freqs  # (N, 3, E)
    sc = np.stack([np.sin(angles), np.cos(angles)], axis=-1).reshape(pts.shape[0], 3 * 2 * E)
    out = np.concatenate([pts, sc], axis=1) if include_identity else sc
    return out[0] if single else out


def normalize_points(points: np.ndarray, bounds) -> np.ndarray:
    """Map the scene bounding box to ``[-1, 1]^3``."""
    if bounds is None:
        return points
    lo, hi = (np.asarray(b, dtype=points.dtype) for b in bounds)
    return (points - (lo + hi) / 2) / ((hi - lo) / 2)


def _softplus(x):
    return np.logaddexp(0, x)


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


class FieldPass:
    """Result of a field query; keeps what :meth:`backward` needs."""

    def __init__(self, weights, arch, raw, cache):
        self.weights = weights
        self.arch = arch
        self.raw = raw
        self._cache = cache
        if arch.density_activation == "relu":
            self.sigma = np.maximum(raw[:, 0], 0)
        else:
            self.sigma = _softplus(raw[:, 0])
        self.color = _sigmoid(raw[:, 1:])

    def backward(self, d_sigma: np.ndarray, d_color: np.ndarray) -> np.ndarray:
        """Weight gradient of ``<sigma, d_sigma> + <color, d_color>``."""
        raw = self.raw
        if self.arch.density_activation == "relu":
            ds = d_sigma * (raw[:, 0] > 0)
        else:
            ds = d_sigma * _sigmoid(raw[:, 0])
        dc = d_color * self.color * (1 - self.color)
        upstream = np.concatenate([ds[:, None], dc], axis=1)
        grad, _ = mlp_backward(self.weights, self.arch, self._cache, upstream)
        return grad


def encode_inputs(points, dirs, enc: EncodingConfig, bounds=None, dtype=None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    if points.shape != dirs.shape or points.ndim != 2 or points.shape[1] != 3:
        raise ContractError(f"points and dirs must both be (N, 3); got {points.shape} and {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1) > 1e-6):
        i = int(np.argmax(np.abs(norms - 1)))
        raise ContractError(f"direction {i} is not unit length (|d| = {norms[i]!r})")
    pe = positional_encode(normalize_points(points, bounds), enc.E_pos, enc.include_identity)
    de = positional_encode(dirs, enc.E_dir, enc.include_identity)
    x = np.concatenate([pe, de], axis=1)
    return x if dtype is None else x.astype(dtype)


def field_query(weights: np.ndarray, arch: MlpArchitecture, enc: EncodingConfig, points, dirs,
                bounds=None) -> FieldPass:
    """Query ``(sigma, color)`` at ``points`` seen along unit directions ``dirs``.

    Density never sees the direction input, so ``sigma`` is exactly
    view-independent for fixed weights. ``bounds`` (``(lo, hi)``) rescales
    positions to ``[-1, 1]`` before encoding.
    """
    if arch.pos_enc_dim != enc.pos_dim or arch.dir_enc_dim != enc.dir_dim:
        raise ContractError("encoding config does not match architecture input widths")
    x = encode_inputs(points, dirs, enc, bounds, dtype=weights.dtype)
    raw, cache = mlp_forward(weights, arch, x)
    return FieldPass(weights, arch, raw, cache)
