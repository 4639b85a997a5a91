"""
Dense tensor primitives.

Tensors are plain numpy arrays, batch-leading and row-major. Every public
operation checks its output for NaN/Inf and raises NonFiniteError naming
itself, so a numerical blow-up is reported where it happens.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..config import settings
from ..errors import NonFiniteError, ShapeError

Tensor = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def default_dtype() -> np.dtype:
    return np.dtype(settings.DTYPE)


def ensure_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(where)
    return x


class ConvSpec(BaseModel):
    """Geometry of a (possibly grouped) 2-D convolution."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel_h: int = Field(gt=0)
    kernel_w: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    groups: int = Field(default=1, gt=0)
    in_channels: int = Field(gt=0)
    out_channels: int = Field(gt=0)

    @model_validator(mode="after")
    def _groups_divide_channels(self) -> "ConvSpec":
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        return self

    @property
    def in_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups

    @property
    def patch_size(self) -> int:
        """Length of one group's receptive-field patch (S of the NMF problem)."""
        return self.in_per_group * self.kernel_h * self.kernel_w

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        hp = height + 2 * self.padding
        wp = width + 2 * self.padding
        if hp < self.kernel_h or wp < self.kernel_w:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} larger than padded input {hp}x{wp}"
            )
        return (hp - self.kernel_h) // self.stride + 1, (wp - self.kernel_w) // self.stride + 1


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return ensure_finite(a @ b, "matmul")


def _check_image(x: Tensor, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W], got shape {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batch size is 0")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {spec.in_channels}")


def unfold(x: Tensor, spec: ConvSpec) -> Tensor:
    """im2col: [B, C, H, W] -> [B, L, C*kh*kw], patches ordered channel-major."""
    _check_image(x, spec)
    b, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    win = win[:, :, :: spec.stride, :: spec.stride][:, :, :ho, :wo]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * spec.kernel_h * spec.kernel_w)
    return np.ascontiguousarray(patches)


def fold(cols: Tensor, x_shape: tuple[int, ...], spec: ConvSpec) -> Tensor:
    """col2im: adjoint of unfold, summing overlapping contributions."""
    b, c, h, w = x_shape
    ho, wo = spec.output_size(h, w)
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    if cols.shape != (b, ho * wo, c * kh * kw):
        raise ShapeError(f"fold expects {(b, ho * wo, c * kh * kw)}, got {cols.shape}")
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[..., i, j].transpose(0, 3, 1, 2)
    return ensure_finite(out[:, :, p : p + h, p : p + w], "fold")


def _group_slices(spec: ConvSpec):
    k = spec.patch_size
    for g in range(spec.groups):
        cols = slice(g * k, (g + 1) * k)
        chans = slice(g * spec.out_per_group, (g + 1) * spec.out_per_group)
        yield g, cols, chans


def _to_map(out: Tensor, b: int, ho: int, wo: int) -> Tensor:
    return np.ascontiguousarray(out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2))


def _from_map(y: Tensor) -> Tensor:
    b, c, ho, wo = y.shape
    return y.transpose(0, 2, 3, 1).reshape(b, ho * wo, c)


def conv2d(
    x: Tensor, weight: Tensor, spec: ConvSpec, bias: Optional[Tensor] = None
) -> Tensor:
    """Grouped cross-correlation; weight is [outC, inC/groups, kh, kw]."""
    expected = (spec.out_channels, spec.in_per_group, spec.kernel_h, spec.kernel_w)
    if weight.shape != expected:
        raise ShapeError(f"conv weight has shape {weight.shape}, layer expects {expected}")
    patches = unfold(x, spec)
    return conv2d_from_patches(patches, weight, spec, x.shape, bias)


def conv2d_from_patches(
    patches: Tensor,
    weight: Tensor,
    spec: ConvSpec,
    x_shape: tuple[int, ...],
    bias: Optional[Tensor] = None,
) -> Tensor:
    b, _, h, w = x_shape
    ho, wo = spec.output_size(h, w)
    out = np.empty((b, ho * wo, spec.out_channels), dtype=patches.dtype)
    for g, cols, chans in _group_slices(spec):
        w_g = weight[chans].reshape(spec.out_per_group, -1)
        out[:, :, chans] = patches[:, :, cols] @ w_g.T
    if bias is not None:
        out += bias
    return ensure_finite(_to_map(out, b, ho, wo), "conv2d")


def conv2d_backward(
    dout: Tensor,
    patches: Tensor,
    weight: Tensor,
    spec: ConvSpec,
    x_shape: tuple[int, ...],
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dweight, dbias) for conv2d_from_patches."""
    d = _from_map(dout)
    dcols = np.empty_like(patches)
    dweight = np.empty_like(weight)
    flat_patches = patches.reshape(-1, patches.shape[-1])
    for g, cols, chans in _group_slices(spec):
        d_g = d[:, :, chans]
        w_g = weight[chans].reshape(spec.out_per_group, -1)
        dcols[:, :, cols] = d_g @ w_g
        dweight[chans] = (d_g.reshape(-1, spec.out_per_group).T @ flat_patches[:, cols]).reshape(
            weight[chans].shape
        )
    dbias = d.reshape(-1, spec.out_channels).sum(axis=0)
    dx = fold(dcols, x_shape, spec)
    return dx, ensure_finite(dweight, "conv2d_backward"), dbias


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(dout: Tensor, out: Tensor) -> Tensor:
    return dout * (out > 0)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.shape[0] == 0:
        raise ShapeError("batch size is 0")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return ensure_finite(e / e.sum(axis=axis, keepdims=True), "softmax")


def flatten(x: Tensor) -> Tensor:
    """Global reshape [B, C, H, W] -> [B, C*H*W]."""
    if x.shape[0] == 0:
        raise ShapeError("batch size is 0")
    return x.reshape(x.shape[0], -1)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> tuple[Tensor, Optional[tuple]]:
    """Per-channel batch norm over (B, H, W).

    In training mode the running statistics are updated in place and a cache
    for batch_norm_backward is returned; in eval mode the cache is None.
    """
    if x.shape[0] == 0:
        raise ShapeError("batch size is 0")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if not training:
        x_hat = (x - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
        return ensure_finite(gamma.reshape(shape) * x_hat + beta.reshape(shape), "batch_norm"), None

    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    count = x.size // x.shape[1]
    unbiased = var * count / (count - 1) if count > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    return ensure_finite(out, "batch_norm"), (x_hat, inv_std, gamma)


def batch_norm_backward(dout: Tensor, cache: tuple) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dgamma, dbeta)."""
    x_hat, inv_std, gamma = cache
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    m = dout.size // dout.shape[1]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * x_hat).sum(axis=axes)
    dx_hat = dout * gamma.reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (
        m * dx_hat
        - dx_hat.sum(axis=axes, keepdims=True)
        - x_hat * (dx_hat * x_hat).sum(axis=axes, keepdims=True)
    )
    return ensure_finite(dx, "batch_norm_backward"), dgamma, dbeta


def map_batch(
    fn: Callable[[Tensor], Any],
    x: Tensor,
    workers: int = 1,
    combine: Callable[[list], Any] = np.concatenate,
) -> Any:
    """Apply fn to contiguous batch chunks and combine the parts in batch order.

    The result does not depend on `workers`: fn sees disjoint slices and the
    chunks are reassembled in their original order.
    """
    if workers <= 1 or x.shape[0] < 2:
        return fn(x)
    chunks = np.array_split(x, min(workers, x.shape[0]), axis=0)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return combine(parts)
