"""Dense convolution and batch-norm kernels on ``(C, H, W)`` or ``(N, C, H, W)`` arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0,
           scale: float | None = None) -> np.ndarray:
    """Bias-free zero-padded cross-correlation.

    ``weight`` is ``(out_ch, in_ch, k, k)``. When ``scale`` is given the weights
    are integer codes: integer-valued inputs are accumulated in int64 (spike
    path; int32 overflows for wide codes), anything else in float64, and the
    sum is multiplied by ``scale``.
    """
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects (N,)C,H,W input and O,I,k,k weights")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {weight.shape[1]}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ValueError("only square kernels are supported")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ValueError("kernel larger than padded input")

    if scale is not None:
        if np.array_equal(x, np.round(x)) and np.abs(x).max(initial=0) < 2**15:
            xs, ws = x.astype(np.int64), weight.astype(np.int64)
        else:
            xs, ws = x.astype(np.float64), weight.astype(np.float64)
    else:
        xs, ws = x, weight

    if padding:
        xs = np.pad(xs, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xs, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N, C, Ho, Wo, k, k
    out = np.tensordot(win, ws, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = np.moveaxis(out, 3, 1)
    if scale is not None:
        out = out.astype(np.float64) * scale
    out = np.ascontiguousarray(out)
    return out if batched else out[0]


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape((-1,) + (1,) * (ndim - 1)) if ndim == 3 else v.reshape(1, -1, 1, 1)


def apply_bn(x: np.ndarray, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    denom = np.asarray(var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise ValueError("batch-norm variance + eps must be positive")
    chan = x.shape[0] if x.ndim == 3 else x.shape[1]
    if len(denom) != chan:
        raise ValueError(f"batch-norm has {len(denom)} channels, input has {chan}")
    std = np.sqrt(denom)
    return (_per_channel(gamma, x.ndim) * (x - _per_channel(mean, x.ndim))
            / _per_channel(std, x.ndim) + _per_channel(beta, x.ndim))


def apply_mean_only_bn(x: np.ndarray, mean) -> np.ndarray:
    chan = x.shape[0] if x.ndim == 3 else x.shape[1]
    if len(mean) != chan:
        raise ValueError(f"mean-only batch-norm has {len(mean)} channels, input has {chan}")
    return x - _per_channel(mean, x.ndim)
