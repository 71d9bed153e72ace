"""Independent reference computations used by the test-suite."""

import numpy as np

from consensus_nerf.netcore import param_count, param_layout

FD_STEP = 1e-5
REL_FLOOR = 1e-6


def he_weights(arch, rng):
    """Well-conditioned float64 weights (He-scaled, nonzero biases) for gradient checks."""
    w = np.zeros(param_count(arch))
    for ls in param_layout(arch):
        w[ls.offset:ls.weight_end] = rng.normal(0, np.sqrt(2 / ls.fan_in), ls.fan_in * ls.fan_out)
        w[ls.weight_end:ls.end] = rng.normal(0, 0.1, ls.fan_out)
    return w


def central_difference(f, x, coords, h=FD_STEP):
    out = []
    for i in coords:
        e = np.zeros_like(x)
        e[i] = h
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(out)


def relative_errors(analytic, numeric, floor=REL_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def count_params_by_hand(arch):
    """Parameter count by walking the network layer by layer."""
    total = 0
    fan_in = arch.pos_enc_dim
    for layer in range(arch.hidden_layers):
        if layer == arch.skip_after_layer:
            fan_in += arch.pos_enc_dim
        total += fan_in * arch.width + arch.width
        fan_in = arch.width
    total += arch.width + 1                                  # density head
    hidden = max(1, arch.width // 2)
    total += (arch.width + arch.dir_enc_dim) * hidden + hidden  # color hidden
    total += hidden * 3 + 3                                  # rgb
    return total


def least_squares(As, bs):
    """Minimiser of sum_i ||A_i x - b_i||^2 via the normal equations."""
    A = np.vstack(As)
    b = np.concatenate(bs)
    return np.linalg.solve(A.T @ A, A.T @ b)


def chord_color(color, radius, sigma):
    """Closed-form color of a ray through a sphere's center over black."""
    return np.asarray(color) * (1 - np.exp(-2 * radius * sigma))
