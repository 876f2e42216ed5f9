"""
Differentiable operators used by the disentangling model and the MI estimators.

All operators take and return `Tensor`s. Feature maps are laid out as
[..., channels, time]; the time axis is always last.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp as _np_logsumexp

from autodiff.tensor import Tensor, unbroadcast
from models.errors import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
LEAKY_SLOPE = 0.2


@dataclass
class ChannelStats:
    """Per-channel statistics removed by instance normalization."""
    mean: np.ndarray
    std: np.ndarray


def conv1d_output_length(length: int, kernel: int, stride: int = 1,
                         dilation: int = 1, padding: int = 0) -> int:
    """Output frame count of a 1-D convolution."""
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """
    1-D cross-correlation with zero padding.

    Args:
        x: Input [C_in, T] or [N, C_in, T]
        weight: Kernel [C_out, C_in, k]
        bias: Optional bias [C_out]
        stride: Step between output frames
        dilation: Spacing between kernel taps
        padding: Zero frames added on both sides

    Returns:
        Output [C_out, T_out] (or [N, C_out, T_out] for batched input)

    Raises:
        ShapeError: On channel mismatch or an input too short for the kernel
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects [N, C, T] input and [C_out, C_in, k] weight, "
                         f"got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: input has {x.shape[1]}, "
                         f"weight expects {weight.shape[1]}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"invalid conv1d geometry stride={stride} dilation={dilation} padding={padding}")

    c_out, _, k = weight.shape
    length = x.shape[2]
    span = dilation * (k - 1) + 1
    if length + 2 * padding < span:
        raise ShapeError(f"conv1d input of {length} frames too short for receptive span {span}")
    t_out = conv1d_output_length(length, k, stride, dilation, padding)
    reach = stride * (t_out - 1) + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    w = weight.data
    # cols: [N, C_in, k, T_out]
    cols = np.stack([xp[:, :, j * dilation:j * dilation + reach:stride] for j in range(k)], axis=2)
    out = np.tensordot(cols, w, axes=([1, 2], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        grad_x = None
        if x.requires_grad:
            grad_cols = np.tensordot(g, w, axes=([1], [0]))  # [N, T_out, C_in, k]
            grad_xp = np.zeros_like(xp)
            for j in range(k):
                grad_xp[:, :, j * dilation:j * dilation + reach:stride] += grad_cols[:, :, :, j].transpose(0, 2, 1)
            grad_x = grad_xp[:, :, padding:padding + length]
        grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 3]))
        grad_b = g.sum(axis=(0, 2)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, weight, bias) if bias is not None else (x, weight)
    result = Tensor._make(out, parents, backward)
    if squeeze:
        result = result.reshape(result.shape[1:])
    return result


def pad1d(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the time axis asymmetrically."""
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    length = x.shape[-1]
    out = np.pad(x.data, widths)
    return Tensor._make(out, (x,), lambda g: (g[..., left:left + length],))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ weight.T + bias."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[1]}, got {x.shape[-1]}")
    a, w = x.data, weight.data
    out = a @ w.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        flat_g = g.reshape(-1, w.shape[0])
        grad_x = g @ w if x.requires_grad else None
        grad_w = flat_g.T @ a.reshape(-1, w.shape[1])
        grad_b = flat_g.sum(axis=0) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = x.data
    scale = np.where(a > 0, 1.0, slope).astype(a.dtype)
    return Tensor._make(a * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def softplus(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._make(np.logaddexp(0.0, a), (x,), lambda g: (g * expit(a),))


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    """Clip values; gradient passes only inside [low, high]."""
    a = x.data
    inside = ((a >= low) & (a <= high)).astype(a.dtype)
    return Tensor._make(np.clip(a, low, high), (x,), lambda g: (g * inside,))


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = x.data
    out = _np_logsumexp(a, axis=axis, keepdims=True)
    weights = np.exp(a - out)
    result = out if keepdims else np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return Tensor._make(np.asarray(result, dtype=a.dtype), (x,), backward)


def avg_pool_time(x: Tensor) -> Tensor:
    """Global average pooling over the time axis: [..., C, T] -> [..., C]."""
    return x.mean(axis=-1)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        position = axis if axis >= 0 else t.ndim + axis + 1
        expanded.append(t.reshape(t.shape[:position] + (1,) + t.shape[position:]))
    return concat(expanded, axis=axis)


def index_select(x: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along one axis (used for shuffling frames or batch entries)."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    shape, dtype = x.shape, x.dtype
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        selector = (slice(None),) * axis + (indices,)
        np.add.at(full, selector, g)
        return (full,)

    return Tensor._make(out, (x,), backward)


def instance_norm(x: Tensor, eps: float = DEFAULT_EPS) -> Tuple[Tensor, ChannelStats]:
    """
    Instance normalization without affine parameters.

    Each channel is standardized over time with the biased variance and
    sigma = sqrt(var + eps), so a constant channel maps to zeros.

    Returns:
        Normalized tensor and the removed per-channel statistics
    """
    if eps <= 0:
        raise ShapeError(f"instance_norm eps must be positive, got {eps}")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    normed = centered / sigma

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * normed).mean(axis=-1, keepdims=True)
        return ((g - g_mean - normed * gx_mean) / sigma,)

    stats = ChannelStats(mean=mu[..., 0], std=sigma[..., 0])
    return Tensor._make(normed, (x,), backward), stats


def adain(x: Tensor, alpha: Tensor, beta: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """
    Adaptive instance normalization: beta * IN(x) + alpha per channel.

    Args:
        x: Feature map [..., C, T]
        alpha: Channel shift [..., C]
        beta: Channel scale [..., C]
    """
    channels = x.shape[-2]
    if alpha.shape[-1] != channels or beta.shape[-1] != channels:
        raise ShapeError(f"adain expects {channels} channels, got alpha {alpha.shape} beta {beta.shape}")
    normed, _ = instance_norm(x, eps)
    return normed * beta.reshape(beta.shape + (1,)) + alpha.reshape(alpha.shape + (1,))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine over the last axis; norms are stabilized as sqrt(|v|^2 + eps^2)."""
    dot = (a * b).sum(axis=-1)
    norm_a = ((a * a).sum(axis=-1) + eps * eps).sqrt()
    norm_b = ((b * b).sum(axis=-1) + eps * eps).sqrt()
    return dot / (norm_a * norm_b)


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


__all__ = [
    "ChannelStats", "conv1d", "conv1d_output_length", "pad1d", "linear",
    "leaky_relu", "relu", "softplus", "clamp", "logsumexp", "avg_pool_time",
    "concat", "stack", "index_select", "instance_norm", "adain",
    "cosine_similarity", "is_finite", "unbroadcast",
]
