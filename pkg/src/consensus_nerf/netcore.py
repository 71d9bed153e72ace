"""Dense radiance-field MLP with hand-written reverse-mode gradients.

The network is a fixed family: an 8-layer ReLU trunk over the encoded
position (the encoded position is concatenated back in after
``skip_after_layer``), a one-unit density head off the trunk, and a color
branch that takes the trunk output plus the encoded view direction through
one hidden ReLU layer into three raw color outputs.

All parameters live in one flat vector (the unit that agents exchange).
Layout is layer-major in the order returned by :func:`param_layout`; each
layer stores its weight matrix row-major with shape ``(fan_in, fan_out)``
followed by its bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"NWV1"
HEADER = struct.Struct("<4s6I")
HEADER_SIZE = HEADER.size  # 28

_PRECISION_FLAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FLAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ContractError(ValueError):
    """A caller violated a documented precondition (shape, range, ...)."""


class WeightFormatError(ValueError):
    """Base class for NWV1 parse failures."""


class BadMagicError(WeightFormatError):
    pass


class TruncatedPayloadError(WeightFormatError):
    pass


class LengthMismatchError(WeightFormatError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    hidden_layers: int = 8
    width: int = 64
    skip_after_layer: int = 5
    pos_enc_dim: int = 39
    dir_enc_dim: int = 27
    activation: str = "relu"
    density_activation: str = "relu"
    color_activation: str = "sigmoid"

    def __post_init__(self):
        for name in ("hidden_layers", "width", "skip_after_layer", "pos_enc_dim", "dir_enc_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.skip_after_layer >= self.hidden_layers:
            raise ContractError(
                f"skip_after_layer ({self.skip_after_layer}) must be < hidden_layers ({self.hidden_layers})"
            )
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        if self.density_activation not in ("relu", "softplus"):
            raise ContractError(f"unsupported density_activation {self.density_activation!r}")
        if self.color_activation != "sigmoid":
            raise ContractError(f"unsupported color_activation {self.color_activation!r}")

    @property
    def color_hidden(self) -> int:
        return max(1, self.width // 2)

    @property
    def input_dim(self) -> int:
        return self.pos_enc_dim + self.dir_enc_dim


@dataclass(frozen=True)
class LayerSlice:
    name: str
    fan_in: int
    fan_out: int
    offset: int

    @property
    def size(self) -> int:
        return (self.fan_in + 1) * self.fan_out

    @property
    def weight_end(self) -> int:
        return self.offset + self.fan_in * self.fan_out

    @property
    def end(self) -> int:
        return self.offset + self.size


def param_layout(arch: MlpArchitecture) -> list[LayerSlice]:
    """Layers in storage order: ``trunk_0..trunk_{H-1}, density, color_hidden, color_out``."""
    shapes = []
    for layer in range(arch.hidden_layers):
        if layer == 0:
            fan_in = arch.pos_enc_dim
        elif layer == arch.skip_after_layer:
            fan_in = arch.width + arch.pos_enc_dim
        else:
            fan_in = arch.width
        shapes.append((f"trunk_{layer}", fan_in, arch.width))
    shapes.append(("density", arch.width, 1))
    shapes.append(("color_hidden", arch.width + arch.dir_enc_dim, arch.color_hidden))
    shapes.append(("color_out", arch.color_hidden, 3))

    layout, offset = [], 0
    for name, fan_in, fan_out in shapes:
        layout.append(LayerSlice(name, fan_in, fan_out, offset))
        offset += (fan_in + 1) * fan_out
    return layout


def param_count(arch: MlpArchitecture) -> int:
    W, H, P, D, C = arch.width, arch.hidden_layers, arch.pos_enc_dim, arch.dir_enc_dim, arch.color_hidden
    trunk = (P + 1) * W + (H - 1) * (W + 1) * W + P * W
    return trunk + (W + 1) + (W + D + 1) * C + (C + 1) * 3


def trunk_slice(arch: MlpArchitecture) -> slice:
    layout = param_layout(arch)
    return slice(0, layout[arch.hidden_layers - 1].end)


def unpack(vec: np.ndarray, arch: MlpArchitecture) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Views ``name -> (W, b)`` into a flat parameter (or gradient) vector."""
    if vec.ndim != 1 or vec.shape[0] != param_count(arch):
        raise ContractError(f"vector length {vec.shape} does not match architecture ({param_count(arch)})")
    out = {}
    for ls in param_layout(arch):
        W = vec[ls.offset:ls.weight_end].reshape(ls.fan_in, ls.fan_out)
        b = vec[ls.weight_end:ls.end]
        out[ls.name] = (W, b)
    return out


def mlp_init(arch: MlpArchitecture, seed: int, dtype=np.float32) -> np.ndarray:
    """Uniform fan-in initialization, bound ``sqrt(1/fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(param_count(arch), dtype=np.float64)
    for ls in param_layout(arch):
        bound = np.sqrt(1.0 / ls.fan_in)
        vec[ls.offset:ls.weight_end] = rng.uniform(-bound, bound, ls.fan_in * ls.fan_out)
    return vec.astype(dtype)


def _dense(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Route every product through the same gemm kernel (>=2 rows, >=4 cols):
    # per-row results then do not depend on batch size or chunking.
    n, k = x.shape[0], W.shape[1]
    if k < 4:
        W = np.concatenate([W, np.zeros((W.shape[0], 4 - k), W.dtype)], axis=1)
    if n == 1:
        y = (np.concatenate([x, x]) @ W)[:1]
    else:
        y = x @ W
    return y[:, :k] + b


@dataclass
class MlpCache:
    inputs: np.ndarray
    trunk_inputs: list = field(default_factory=list)
    trunk_pre: list = field(default_factory=list)
    trunk_out: np.ndarray | None = None
    color_in: np.ndarray | None = None
    color_pre: np.ndarray | None = None
    color_act: np.ndarray | None = None


def mlp_forward(weights: np.ndarray, arch: MlpArchitecture, inputs: np.ndarray):
    """Raw outputs ``(N, 4)`` = ``[density_raw, r_raw, g_raw, b_raw]`` plus a cache for backprop."""
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != arch.input_dim:
        raise ContractError(f"inputs must have shape (N, {arch.input_dim}), got {inputs.shape}")
    inputs = inputs.astype(weights.dtype, copy=False)
    params = unpack(weights, arch)
    pos = inputs[:, :arch.pos_enc_dim]
    dirs = inputs[:, arch.pos_enc_dim:]

    cache = MlpCache(inputs=inputs)
    h = pos
    for layer in range(arch.hidden_layers):
        if layer == arch.skip_after_layer:
            h = np.concatenate([h, pos], axis=1)
        W, b = params[f"trunk_{layer}"]
        z = _dense(h, W, b)
        cache.trunk_inputs.append(h)
        cache.trunk_pre.append(z)
        h = np.maximum(z, 0)
    cache.trunk_out = h

    density = _dense(h, *params["density"])
    cache.color_in = np.concatenate([h, dirs], axis=1)
    cache.color_pre = _dense(cache.color_in, *params["color_hidden"])
    cache.color_act = np.maximum(cache.color_pre, 0)
    rgb = _dense(cache.color_act, *params["color_out"])
    return np.concatenate([density, rgb], axis=1), cache


def mlp_backward(weights: np.ndarray, arch: MlpArchitecture, cache: MlpCache, upstream: np.ndarray):
    """Gradient of ``<outputs, upstream>`` w.r.t. the flat weights and the inputs."""
    upstream = np.asarray(upstream)
    n = cache.inputs.shape[0]
    if upstream.shape != (n, 4):
        raise ContractError(f"upstream_grad must have shape ({n}, 4), got {upstream.shape}")
    upstream = upstream.astype(weights.dtype, copy=False)
    params = unpack(weights, arch)
    grad = np.zeros_like(weights)
    gparams = unpack(grad, arch)
    P = arch.pos_enc_dim
    d_inputs = np.zeros_like(cache.inputs)

    d_rgb = upstream[:, 1:]
    W, _ = params["color_out"]
    gW, gb = gparams["color_out"]
    gW[...] = cache.color_act.T @ d_rgb
    gb[...] = d_rgb.sum(0)
    d_hidden = (d_rgb @ W.T) * (cache.color_pre > 0)

    W, _ = params["color_hidden"]
    gW, gb = gparams["color_hidden"]
    gW[...] = cache.color_in.T @ d_hidden
    gb[...] = d_hidden.sum(0)
    d_color_in = d_hidden @ W.T
    d_inputs[:, P:] = d_color_in[:, arch.width:]
    d_h = d_color_in[:, :arch.width]

    d_sigma = upstream[:, :1]
    W, _ = params["density"]
    gW, gb = gparams["density"]
    gW[...] = cache.trunk_out.T @ d_sigma
    gb[...] = d_sigma.sum(0)
    d_h = d_h + d_sigma @ W.T

    for layer in reversed(range(arch.hidden_layers)):
        d_z = d_h * (cache.trunk_pre[layer] > 0)
        W, _ = params[f"trunk_{layer}"]
        gW, gb = gparams[f"trunk_{layer}"]
        gW[...] = cache.trunk_inputs[layer].T @ d_z
        gb[...] = d_z.sum(0)
        d_in = d_z @ W.T
        if layer == 0:
            d_inputs[:, :P] += d_in
        elif layer == arch.skip_after_layer:
            d_h = d_in[:, :arch.width]
            d_inputs[:, :P] += d_in[:, arch.width:]
        else:
            d_h = d_in
    return grad, d_inputs


def mlp_forward_backward(weights, arch, inputs, upstream_grad=None):
    """Forward pass and, when ``upstream_grad`` is given, the reverse pass.

    Returns ``(outputs, grad, input_grad)``; the last two are ``None`` without
    an upstream gradient.
    """
    out, cache = mlp_forward(weights, arch, inputs)
    if upstream_grad is None:
        return out, None, None
    grad, d_inputs = mlp_backward(weights, arch, cache, upstream_grad)
    return out, grad, d_inputs


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, dtype=np.float32, **hyper) -> "AdamState":
        return cls(np.zeros(n, dtype), np.zeros(n, dtype), 0, **hyper)


def _check_finite(grad: np.ndarray):
    bad = ~np.isfinite(grad)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise FloatingPointError(f"non-finite gradient entry at index {idx}: {grad[idx]!r}")


def adam_step(weights: np.ndarray, grad: np.ndarray, state: AdamState):
    if weights.shape != grad.shape or state.first_moment.shape != weights.shape:
        raise ContractError("weights, grad and optimizer moments must have matching lengths")
    _check_finite(grad)
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = weights - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = new.astype(weights.dtype, copy=False)
    m = m.astype(weights.dtype, copy=False)
    v = v.astype(weights.dtype, copy=False)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


def sgd_step(weights: np.ndarray, grad: np.ndarray, state: AdamState):
    """Plain gradient descent with ``state.lr``; moments are carried through untouched."""
    if weights.shape != grad.shape:
        raise ContractError("weights and grad must have matching lengths")
    _check_finite(grad)
    new = (weights - state.lr * grad).astype(weights.dtype, copy=False)
    return new, AdamState(state.first_moment, state.second_moment, state.step_count + 1,
                          state.lr, state.beta1, state.beta2, state.eps)


OPTIMIZERS = {"adam": adam_step, "sgd": sgd_step}


def serialized_size(n_params: int, precision: int = 32) -> int:
    return HEADER_SIZE + (precision // 8) * n_params


def serialize_weights(weights: np.ndarray, arch: MlpArchitecture | None) -> bytes:
    """Encode as NWV1: magic, six little-endian u32 header fields, raw reals.

    ``arch=None`` writes a bare vector: ``hidden_layers=0`` and the element
    count in the ``width`` field (used for non-network objectives).
    """
    weights = np.asarray(weights)
    dtype = weights.dtype
    if dtype not in _PRECISION_FLAGS:
        raise ContractError(f"weights must be float32 or float64, got {dtype}")
    if arch is None:
        fields = (0, weights.size, 0, 0, 0)
    else:
        if weights.shape != (param_count(arch),):
            raise ContractError("weight length does not match architecture")
        fields = (arch.hidden_layers, arch.width, arch.skip_after_layer, arch.pos_enc_dim, arch.dir_enc_dim)
    header = HEADER.pack(MAGIC, *fields, _PRECISION_FLAGS[dtype])
    return header + weights.astype(dtype.newbyteorder("<"), copy=False).tobytes()


def deserialize_weights(data: bytes):
    """Inverse of :func:`serialize_weights`; returns ``(weights, arch_or_None)``."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header truncated: {len(data)} < {HEADER_SIZE} bytes")
    _, hidden, width, skip, pos, dirs, flag = HEADER.unpack_from(data)
    if flag not in _FLAG_DTYPES:
        raise WeightFormatError(f"unknown precision flag {flag}")
    dtype = _FLAG_DTYPES[flag]
    if hidden == 0:
        arch, n = None, width
    else:
        try:
            arch = MlpArchitecture(hidden, width, skip, pos, dirs)
        except ContractError as exc:
            raise WeightFormatError(f"invalid architecture header: {exc}") from None
        n = param_count(arch)
    expected = n * dtype.itemsize
    payload = len(data) - HEADER_SIZE
    if payload < expected:
        raise TruncatedPayloadError(f"payload has {payload} bytes, header implies {expected}")
    if payload > expected:
        raise LengthMismatchError(f"payload has {payload} bytes, header implies {expected}")
    weights = np.frombuffer(data, dtype=dtype, offset=HEADER_SIZE).astype(dtype.newbyteorder("="))
    return weights, arch
