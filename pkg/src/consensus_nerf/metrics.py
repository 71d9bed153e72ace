"""Image-quality and consensus metrics."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netcore import ContractError, MlpArchitecture, param_count, param_layout

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in ``[0, 1]``; 99 dB when MSE < 1e-10."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ContractError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) on Rec. 601 luma."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < 11:
        raise ContractError(f"image {a.shape[:2]} smaller than the 11x11 SSIM window")
    x, y = _luma(a), _luma(b)
    g = _gaussian_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def disagreement_norm(weights, graph) -> float:
    """Largest L2 distance between the weight vectors of adjacent agents."""
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    if len({w.shape for w in weights}) > 1:
        raise ContractError("weight vectors have different lengths")
    if len(weights) != graph.n_agents:
        raise ContractError(f"{len(weights)} weight vectors for {graph.n_agents} agents")
    return max((float(np.linalg.norm(weights[i] - weights[j])) for i, j in graph.edges), default=0.0)


def layer_grad_norms(grad, arch: MlpArchitecture) -> np.ndarray:
    """L2 norm of each trunk layer's gradient (weights and bias), input side first."""
    grad = np.asarray(grad)
    if grad.shape != (param_count(arch),):
        raise ContractError(f"gradient length {grad.shape} does not match architecture")
    g = grad.astype(np.float64)
    layout = param_layout(arch)[:arch.hidden_layers]
    return np.array([np.linalg.norm(g[ls.offset:ls.end]) for ls in layout])
