"""Dense tensor kernels: matmul, 2-D convolution with hand-written backward,
elementwise and reduction helpers.

Arrays are numpy ndarrays in row-major (C) order, float32 or float64.
Convolutions use NHWC layout with kernels shaped (kh, kw, c_in, c_out);
channel-last makes level-wise channel slicing a contiguous trailing-block
operation. All kernels are deterministic: repeated calls on identical
inputs are bit-identical (fixed loop order, no threading on the reference
path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def as_tensor(data, bits: int = 32) -> np.ndarray:
    """Return a C-contiguous float array of the requested precision (32 or 64)."""
    if bits == 32:
        dt = np.float32
    elif bits == 64:
        dt = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    return np.ascontiguousarray(data, dtype=dt)


def _check_float(a: np.ndarray, name: str) -> None:
    if a.dtype.type not in (np.float32, np.float64):
        raise DimensionError(f"{name} must be float32 or float64, got {a.dtype}")


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return a


@dataclass(frozen=True)
class ConvGeometry:
    """Stride and symmetric zero padding of a 2-D convolution."""

    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    def out_size(self, in_size: int, kernel: int) -> int:
        out = (in_size + 2 * self.padding - kernel) // self.stride + 1
        if out < 1:
            raise DimensionError(
                f"conv output size {out} < 1 (in={in_size}, kernel={kernel}, "
                f"stride={self.stride}, pad={self.padding})"
            )
        return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[i, j] = sum_t a[i, t] * b[t, j] for 2-D float arrays."""
    _check_float(a, "a")
    _check_float(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"mixed precisions: {a.dtype} x {b.dtype}")
    return _check_finite(a @ b, "matmul")


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Gather sliding windows of a padded NHWC batch into
    (N, Ho, Wo, kh, kw, C)."""
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols


def _conv_shapes(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry):
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d needs NHWC input and (kh, kw, ci, co) kernel, got {x.shape} and {kernel.shape}"
        )
    if x.dtype != kernel.dtype:
        raise DimensionError(f"mixed precisions: {x.dtype} x {kernel.dtype}")
    kh, kw, ci, co = kernel.shape
    if x.shape[3] != ci:
        raise DimensionError(f"channel mismatch: input has {x.shape[3]}, kernel expects {ci}")
    ho = geom.out_size(x.shape[1], kh)
    wo = geom.out_size(x.shape[2], kw)
    return kh, kw, ci, co, ho, wo


def conv2d(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Cross-correlation of an NHWC batch with zero padding.

    out[n, i, j, o] = sum_{a, b, c} x[n, i*s + a - p, j*s + b - p, c] * kernel[a, b, c, o]
    """
    _check_float(x, "x")
    _check_float(kernel, "kernel")
    kh, kw, ci, co, ho, wo = _conv_shapes(x, kernel, geom)
    xp = _pad2d(x, geom.padding)
    cols = _im2col(xp, kh, kw, geom.stride)
    n = x.shape[0]
    out = cols.reshape(n * ho * wo, kh * kw * ci) @ kernel.reshape(kh * kw * ci, co)
    return _check_finite(out.reshape(n, ho, wo, co), "conv2d")


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray, geom: ConvGeometry
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the conv2d contract.

    Returns (grad_input, grad_kernel) for upstream gradient grad_out of
    shape (N, Ho, Wo, co).
    """
    kh, kw, ci, co, ho, wo = _conv_shapes(x, kernel, geom)
    if grad_out.shape != (x.shape[0], ho, wo, co):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} inconsistent with conv output {(x.shape[0], ho, wo, co)}"
        )
    if grad_out.dtype != x.dtype:
        raise DimensionError(f"mixed precisions: {x.dtype} x {grad_out.dtype}")
    n = x.shape[0]
    s, p = geom.stride, geom.padding
    xp = _pad2d(x, p)
    cols = _im2col(xp, kh, kw, s).reshape(n * ho * wo, kh * kw * ci)
    gflat = grad_out.reshape(n * ho * wo, co)

    grad_kernel = (cols.T @ gflat).reshape(kh, kw, ci, co)

    grad_cols = (gflat @ kernel.reshape(kh * kw * ci, co).T).reshape(n, ho, wo, kh, kw, ci)
    grad_xp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i : i + s * ho : s, j : j + s * wo : s, :] += grad_cols[:, :, :, i, j, :]
    grad_x = grad_xp if p == 0 else grad_xp[:, p:-p, p:-p, :]
    _check_finite(grad_kernel, "conv2d_backward")
    _check_finite(grad_x, "conv2d_backward")
    return np.ascontiguousarray(grad_x), grad_kernel


def _binary(op: str, a: np.ndarray, b) -> np.ndarray:
    _check_float(a, "a")
    if isinstance(b, np.ndarray) and b.ndim > 0:
        if a.shape != b.shape:
            raise DimensionError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    return b


def add(a: np.ndarray, b) -> np.ndarray:
    _binary("add", a, b)
    return _check_finite(a + b, "add")


def sub(a: np.ndarray, b) -> np.ndarray:
    _binary("sub", a, b)
    return _check_finite(a - b, "sub")


def mul(a: np.ndarray, b) -> np.ndarray:
    _binary("mul", a, b)
    return _check_finite(a * b, "mul")


def max0(a: np.ndarray) -> np.ndarray:
    """x -> max(x, 0), elementwise."""
    _check_float(a, "a")
    return np.maximum(a, 0)


def scale(a: np.ndarray, factor: float) -> np.ndarray:
    _check_float(a, "a")
    return _check_finite(a * a.dtype.type(factor), "scale")


def reduce_sum(a: np.ndarray) -> np.ndarray:
    if a.size == 0:
        raise DimensionError("reduce over empty tensor")
    return _check_finite(np.asarray(a.sum()), "reduce_sum")


def reduce_mean(a: np.ndarray) -> np.ndarray:
    if a.size == 0:
        raise DimensionError("reduce over empty tensor")
    return _check_finite(np.asarray(a.mean()), "reduce_mean")


def argmax_last(a: np.ndarray) -> np.ndarray:
    """Index of the maximum along the last axis; ties break to the lowest index."""
    if a.size == 0:
        raise DimensionError("reduce over empty tensor")
    return np.argmax(a, axis=-1)
