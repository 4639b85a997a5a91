"""
Supervised NMF layer.

The trainable object is the auxiliary matrix U; the non-negative,
column-normalized weight W = |U| / sum_k |U_k| is derived from it on every
forward pass. The layer output is h(N), the result of N iterations of the
h-dynamics started from h(0) = 1/I.

Only the state needed by the approximate backward pass is retained: the
normalized input, h(N), the state h(N-1) the last update was taken from and
its reconstruction R. Nothing grows with N.
"""
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from ..config import settings
from ..core.tensor import ConvSpec, Tensor, default_dtype, ensure_finite, map_batch, unfold
from ..errors import DegenerateFactorError, NegativeInputError, ShapeError


@dataclass
class NmfParams:
    """Auxiliary matrix U of shape [S, I], or [G, S, I] for a grouped layer."""

    U: Tensor

    @classmethod
    def init(
        cls,
        n_inputs: int,
        n_latents: int,
        rng: np.random.Generator,
        groups: Optional[int] = None,
        dtype: Optional[np.dtype] = None,
    ) -> "NmfParams":
        shape = (n_inputs, n_latents) if groups is None else (groups, n_inputs, n_latents)
        U = np.abs(rng.standard_normal(shape)) / n_inputs
        return cls(U=U.astype(dtype or default_dtype()))

    @property
    def W(self) -> Tensor:
        return derive_w(self.U)


@dataclass
class NmfForwardState:
    """What the one-step backward needs, independent of N.

    The backward linearizes the last update at the state it was taken from,
    h(N-1), rather than at the output h(N); at N = 1 this makes it the exact
    derivative. That is why `h_prev` and its `R` are kept alongside `h`.
    """

    h: Tensor  # h(N), the layer output, [..., I]
    h_prev: Tensor  # h(N-1), linearization point of the backward pass
    R: Tensor  # R_s = sum_j W_sj h_prev_j, floored, [..., S]
    x_norm: Tensor  # normalized input patches, [..., S]
    x_scale: Tensor  # patch sums before normalization, [...]
    n_iters: int
    epsilon: float


def derive_w(U: Tensor) -> Tensor:
    """W_si = |U_si| / sum_k |U_ki|, normalized along the input axis."""
    a = np.abs(U)
    sums = a.sum(axis=-2, keepdims=True)
    if np.any(sums == 0):
        dead = np.argwhere(sums[..., 0, :] == 0)[0]
        raise DegenerateFactorError(int(dead[-1]), f"latent column {int(dead[-1])} of U is all zero")
    return a / sums


def normalize_input(x: Tensor) -> tuple[Tensor, Tensor]:
    """Scale each patch along the last axis to sum 1.

    All-zero patches map to the uniform vector 1/S. Returns the normalized
    patches and the original sums.
    """
    ensure_finite(x, "normalize_input")
    if np.any(x < 0):
        raise NegativeInputError("NMF input must be non-negative")
    sums = x.sum(axis=-1, keepdims=True)
    size = x.shape[-1]
    safe = np.where(sums > 0, sums, 1.0)
    out = np.where(sums > 0, x / safe, 1.0 / size)
    return out, sums[..., 0]


def reconstruction(W: Tensor, h: Tensor) -> Tensor:
    """R_s = sum_j W_sj h_j, floored at EPS_DIV."""
    return np.maximum(h @ W.T, settings.EPS_DIV)


def h_step(x: Tensor, W: Tensor, h: Tensor, epsilon: float = 1.0) -> Tensor:
    """h'_i = h_i + eps h_i (sum_s x_s W_si / R_s - 1)."""
    g = (x / reconstruction(W, h)) @ W
    if epsilon == 1.0:
        out = h * g
    else:
        out = h + epsilon * h * (g - 1.0)
    return ensure_finite(out, "h_step")


def _check_patches(x: Tensor, W: Tensor) -> None:
    if W.ndim != 2:
        raise ShapeError(f"W must be [S, I], got {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"patch length {x.shape[-1]} does not match W rows {W.shape[0]}")


def iterate_h(
    x_norm: Tensor, W: Tensor, n_iters: int, epsilon: float = 1.0
) -> Iterator[Tensor]:
    """Yield h(1), ..., h(N) for already-normalized patches."""
    if n_iters < 1:
        raise ShapeError("n_iters must be >= 1")
    _check_patches(x_norm, W)
    n_latents = W.shape[1]
    h = np.full(x_norm.shape[:-1] + (n_latents,), 1.0 / n_latents, dtype=x_norm.dtype)
    for _ in range(n_iters):
        h = h_step(x_norm, W, h, epsilon)
        yield h


def nmf_forward(
    x_patches: Tensor,
    params,
    n_iters: Optional[int] = None,
    epsilon: Optional[float] = None,
) -> NmfForwardState:
    """Run the h-dynamics on patches [..., S] with weight W [S, I].

    `params` is an NmfParams or an already derived W.
    """
    n_iters = settings.NMF_ITERS if n_iters is None else n_iters
    epsilon = settings.NMF_EPSILON if epsilon is None else epsilon
    if n_iters < 1:
        raise ShapeError("n_iters must be >= 1")
    W = params.W if isinstance(params, NmfParams) else params
    _check_patches(x_patches, W)
    x_norm, x_scale = normalize_input(x_patches)

    n_latents = W.shape[1]
    h_prev = np.full(x_norm.shape[:-1] + (n_latents,), 1.0 / n_latents, dtype=x_norm.dtype)
    for _ in range(n_iters - 1):
        h_prev = h_step(x_norm, W, h_prev, epsilon)
    h = h_step(x_norm, W, h_prev, epsilon)
    return NmfForwardState(
        h=h,
        h_prev=h_prev,
        R=reconstruction(W, h_prev),
        x_norm=x_norm,
        x_scale=x_scale,
        n_iters=n_iters,
        epsilon=epsilon,
    )


@dataclass
class CnmfState:
    output: Tensor  # [B, outC, H', W']
    groups: list[NmfForwardState]  # per group, arrays of shape [B, L, .]
    x_shape: tuple[int, ...]
    spec: ConvSpec


def _check_nmf_weights(U: Tensor, spec: ConvSpec) -> None:
    expected = (spec.groups, spec.patch_size, spec.out_per_group)
    if U.shape != expected:
        raise ShapeError(f"CNMF U has shape {U.shape}, layer expects {expected}")


def cnmf_forward_state(
    x: Tensor,
    params: NmfParams,
    spec: ConvSpec,
    n_iters: Optional[int] = None,
    epsilon: Optional[float] = None,
    workers: Optional[int] = None,
) -> CnmfState:
    """Convolutional NMF: one shared-weight NMF problem per receptive field."""
    _check_nmf_weights(params.U, spec)
    if np.any(x < 0):
        raise NegativeInputError("CNMF input must be non-negative")
    workers = settings.WORKERS if workers is None else workers
    patches = unfold(x, spec)
    b, n_pos, _ = patches.shape
    W = params.W
    k = spec.patch_size

    states = []
    out = np.empty((b, n_pos, spec.out_channels), dtype=patches.dtype)
    for g in range(spec.groups):
        x_g = patches[:, :, g * k : (g + 1) * k]
        state = nmf_forward_batched(x_g, W[g], n_iters, epsilon, workers)
        states.append(state)
        out[:, :, g * spec.out_per_group : (g + 1) * spec.out_per_group] = state.h

    _, _, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    output = np.ascontiguousarray(out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2))
    return CnmfState(output=output, groups=states, x_shape=x.shape, spec=spec)


def _concat_states(parts: list[NmfForwardState]) -> NmfForwardState:
    first = parts[0]
    return NmfForwardState(
        h=np.concatenate([p.h for p in parts]),
        h_prev=np.concatenate([p.h_prev for p in parts]),
        R=np.concatenate([p.R for p in parts]),
        x_norm=np.concatenate([p.x_norm for p in parts]),
        x_scale=np.concatenate([p.x_scale for p in parts]),
        n_iters=first.n_iters,
        epsilon=first.epsilon,
    )


def nmf_forward_batched(
    x_patches: Tensor,
    W: Tensor,
    n_iters: Optional[int] = None,
    epsilon: Optional[float] = None,
    workers: int = 1,
) -> NmfForwardState:
    """nmf_forward over batch chunks in a thread pool; same result for any `workers`."""
    return map_batch(
        lambda chunk: nmf_forward(chunk, W, n_iters, epsilon), x_patches, workers, combine=_concat_states
    )


def cnmf_forward(
    x: Tensor,
    params: NmfParams,
    spec: ConvSpec,
    n_iters: Optional[int] = None,
    epsilon: Optional[float] = None,
) -> Tensor:
    return cnmf_forward_state(x, params, spec, n_iters, epsilon).output
