"""
Backward passes for NMF layers.

The approximate backward differentiates a single update of the h-dynamics,
taken at the retained state, instead of the whole N-step trajectory:

    phi_in_s  = sum_i phi_i W_si h_i / R_s
    grad_w_si = h_i x_s / R_s^2 (phi_i R_s - sum_j W_sj h_j phi_j)

The unrolled backward is the exact reverse-mode derivative through every
iteration; it stores the full trajectory and is used as the reference.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..config import settings
from ..core.ledger import BufferLedger, release, track
from ..core.tensor import ConvSpec, Tensor, ensure_finite, fold, unfold
from ..errors import BudgetExceededError, NegativeInputError, ShapeError
from ..models.enums import GradMode
from .nmf_layer import CnmfState, NmfForwardState, NmfParams, derive_w, h_step, normalize_input


@dataclass
class BackpropSignal:
    phi_out: Tensor
    phi_in: Tensor
    grad_w: Tensor
    grad_u: Tensor


def _flat(a: Tensor) -> Tensor:
    return a.reshape(-1, a.shape[-1])


def _check_state(phi_out: Tensor, state: NmfForwardState, W: Tensor) -> None:
    if phi_out.shape != state.h.shape:
        raise ShapeError(f"error signal {phi_out.shape} does not match layer output {state.h.shape}")
    if W.shape != (state.x_norm.shape[-1], state.h.shape[-1]):
        raise ShapeError(f"W {W.shape} does not match stored state")


def normalization_backward(phi: Tensor, x_norm: Tensor, x_scale: Tensor) -> Tensor:
    """Jacobian-transpose of x -> x / sum(x) applied to phi.

    Degenerate (all-zero) patches were replaced by a constant and pass no error.
    """
    scale = x_scale[..., None]
    inner = (phi * x_norm).sum(axis=-1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale > 0, (phi - inner) / safe, 0.0)


def backprop_input(
    phi_out: Tensor,
    state: NmfForwardState,
    W: Tensor,
    mode: GradMode = GradMode.DIRECT,
    ledger: Optional[BufferLedger] = None,
) -> Tensor:
    _check_state(phi_out, state, W)
    track(ledger, state.h_prev, state.R, state.x_norm)
    weighted = phi_out * state.h_prev
    track(ledger, weighted)
    phi_in = (weighted @ W.T) / state.R
    track(ledger, phi_in)
    release(ledger, weighted)
    if mode == GradMode.CHAIN:
        phi_in = normalization_backward(phi_in, state.x_norm, state.x_scale)
    return ensure_finite(phi_in, "backprop_input")


def weight_grad(
    phi_out: Tensor,
    state: NmfForwardState,
    W: Tensor,
    ledger: Optional[BufferLedger] = None,
) -> Tensor:
    """Weight error accumulated over every leading (batch, position) axis."""
    _check_state(phi_out, state, W)
    ratio = state.x_norm / state.R
    weighted = state.h_prev * phi_out
    q = (weighted @ W.T) / state.R
    track(ledger, ratio, weighted, q)
    grad_w = _flat(ratio).T @ _flat(weighted) - _flat(ratio * q).T @ _flat(state.h_prev)
    track(ledger, grad_w)
    release(ledger, ratio, weighted, q)
    return ensure_finite(grad_w, "weight_grad")


def chain_to_u(grad_w: Tensor, U: Tensor, mode: GradMode = GradMode.DIRECT) -> Tensor:
    """Map the weight error onto the auxiliary matrix U."""
    mode = GradMode(mode)
    if mode == GradMode.DIRECT:
        return grad_w.copy()
    sums = np.abs(U).sum(axis=-2, keepdims=True)
    W = np.abs(U) / sums
    inner = (W * grad_w).sum(axis=-2, keepdims=True)
    return ensure_finite(np.sign(U) / sums * (grad_w - inner), "chain_to_u")


def nmf_backward(
    phi_out: Tensor,
    state: NmfForwardState,
    params: NmfParams,
    mode: GradMode = GradMode.DIRECT,
    ledger: Optional[BufferLedger] = None,
) -> BackpropSignal:
    W = params.W
    phi_in = backprop_input(phi_out, state, W, mode, ledger)
    grad_w = weight_grad(phi_out, state, W, ledger)
    return BackpropSignal(
        phi_out=phi_out, phi_in=phi_in, grad_w=grad_w, grad_u=chain_to_u(grad_w, params.U, mode)
    )


# -- exact reference ---------------------------------------------------------


@dataclass
class Trajectory:
    x_norm: Tensor
    x_scale: Tensor
    W: Tensor
    hs: list[Tensor]  # h(0) .. h(N)
    raw_R: list[Tensor]  # unfloored R at h(0) .. h(N-1)
    epsilon: float

    @property
    def output(self) -> Tensor:
        return self.hs[-1]


def record_trajectory(
    x: Tensor,
    W: Tensor,
    n_iters: int,
    epsilon: float = 1.0,
    budget: Optional[int] = None,
    ledger: Optional[BufferLedger] = None,
) -> Trajectory:
    """Forward pass that keeps every intermediate h(t) and R(t)."""
    if n_iters < 1:
        raise ShapeError("n_iters must be >= 1")
    budget = settings.UNROLL_BUDGET if budget is None else budget
    n_patterns = x.size // x.shape[-1]
    cost = n_patterns * W.shape[0] * W.shape[1] * n_iters
    if cost > budget:
        raise BudgetExceededError(
            f"unrolled backward needs {cost} element-steps, budget is {budget}"
        )
    x_norm, x_scale = normalize_input(x)
    h = np.full(x_norm.shape[:-1] + (W.shape[1],), 1.0 / W.shape[1], dtype=x_norm.dtype)
    hs, raw_R = [h], []
    track(ledger, x_norm, h)
    for _ in range(n_iters):
        R = h @ W.T
        h = h_step(x_norm, W, h, epsilon)
        raw_R.append(R)
        hs.append(h)
        track(ledger, R, h)
    return Trajectory(x_norm=x_norm, x_scale=x_scale, W=W, hs=hs, raw_R=raw_R, epsilon=epsilon)


def reverse_sweep(
    traj: Trajectory, phi_out: Tensor, ledger: Optional[BufferLedger] = None
) -> tuple[Tensor, Tensor]:
    """Exact (phi_in w.r.t. the raw input, grad_w) through all N updates."""
    if phi_out.shape != traj.output.shape:
        raise ShapeError(f"error signal {phi_out.shape} does not match layer output {traj.output.shape}")
    W, x, eps = traj.W, traj.x_norm, traj.epsilon
    adj_h = phi_out.copy()
    adj_x = np.zeros_like(x)
    grad_w = np.zeros_like(W)
    track(ledger, adj_h, adj_x, grad_w)
    for t in reversed(range(len(traj.raw_R))):
        h, raw = traj.hs[t], traj.raw_R[t]
        R = np.maximum(raw, settings.EPS_DIV)
        ratio = x / R
        g = ratio @ W
        b = adj_h * eps * h  # error reaching g
        bw = b @ W.T
        adj_x += bw / R
        adj_R = np.where(raw > settings.EPS_DIV, -bw * x / R**2, 0.0)
        grad_w += _flat(ratio).T @ _flat(b) + _flat(adj_R).T @ _flat(h)
        adj_h = adj_h * (1.0 - eps + eps * g) + adj_R @ W
        track(ledger, ratio, g, b, bw, adj_R)
        release(ledger, ratio, g, b, bw, adj_R)
    phi_in = normalization_backward(adj_x, traj.x_norm, traj.x_scale)
    return ensure_finite(phi_in, "reverse_sweep"), ensure_finite(grad_w, "reverse_sweep")


def unrolled_backward(
    x: Tensor,
    U: Tensor,
    n_iters: int,
    epsilon: float,
    phi_out: Tensor,
    budget: Optional[int] = None,
) -> tuple[Tensor, Tensor]:
    """Exact (phi_in, grad_u) of <phi_out, h(N)> w.r.t. the raw input and U."""
    traj = record_trajectory(x, derive_w(U), n_iters, epsilon, budget)
    phi_in, grad_w = reverse_sweep(traj, phi_out)
    return phi_in, chain_to_u(grad_w, U, GradMode.CHAIN)


# -- convolutional layers ----------------------------------------------------


def _to_positions(y: Tensor) -> Tensor:
    b, c, ho, wo = y.shape
    return y.transpose(0, 2, 3, 1).reshape(b, ho * wo, c)


def cnmf_backward(
    phi_out: Tensor,
    cstate: CnmfState,
    params: NmfParams,
    mode: GradMode = GradMode.DIRECT,
    ledger: Optional[BufferLedger] = None,
) -> tuple[Tensor, Tensor]:
    """Approximate backward of a CNMF layer: (phi w.r.t. the input map, grad_u)."""
    if phi_out.shape != cstate.output.shape:
        raise ShapeError(f"error map {phi_out.shape} does not match output {cstate.output.shape}")
    spec = cstate.spec
    phi = _to_positions(phi_out)
    W = params.W
    k, o = spec.patch_size, spec.out_per_group
    b, n_pos, _ = phi.shape
    dcols = np.empty((b, n_pos, spec.in_channels * spec.kernel_h * spec.kernel_w), dtype=phi.dtype)
    grad_w = np.empty_like(params.U)
    for g, state in enumerate(cstate.groups):
        phi_g = phi[:, :, g * o : (g + 1) * o]
        dcols[:, :, g * k : (g + 1) * k] = backprop_input(phi_g, state, W[g], mode, ledger)
        grad_w[g] = weight_grad(phi_g, state, W[g], ledger)
    return fold(dcols, cstate.x_shape, spec), chain_to_u(grad_w, params.U, mode)


@dataclass
class CnmfTrajectory:
    output: Tensor
    groups: list[Trajectory]
    x_shape: tuple[int, ...]
    spec: ConvSpec


def cnmf_record(
    x: Tensor,
    params: NmfParams,
    spec: ConvSpec,
    n_iters: int,
    epsilon: float = 1.0,
    budget: Optional[int] = None,
    ledger: Optional[BufferLedger] = None,
) -> CnmfTrajectory:
    """CNMF forward that keeps the full trajectory for the unrolled backward."""
    if np.any(x < 0):
        raise NegativeInputError("CNMF input must be non-negative")
    patches = unfold(x, spec)
    b, n_pos, _ = patches.shape
    W = params.W
    k, o = spec.patch_size, spec.out_per_group
    out = np.empty((b, n_pos, spec.out_channels), dtype=patches.dtype)
    trajs = []
    for g in range(spec.groups):
        traj = record_trajectory(patches[:, :, g * k : (g + 1) * k], W[g], n_iters, epsilon, budget, ledger)
        out[:, :, g * o : (g + 1) * o] = traj.output
        trajs.append(traj)
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    output = np.ascontiguousarray(out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2))
    return CnmfTrajectory(output=output, groups=trajs, x_shape=x.shape, spec=spec)


def cnmf_unrolled_backward(
    phi_out: Tensor,
    ctraj: CnmfTrajectory,
    params: NmfParams,
    ledger: Optional[BufferLedger] = None,
) -> tuple[Tensor, Tensor]:
    """Exact backward of a CNMF layer: (phi w.r.t. the input map, grad_u)."""
    spec = ctraj.spec
    phi = _to_positions(phi_out)
    k, o = spec.patch_size, spec.out_per_group
    b, n_pos, _ = phi.shape
    dcols = np.empty((b, n_pos, spec.in_channels * spec.kernel_h * spec.kernel_w), dtype=phi.dtype)
    grad_w = np.empty_like(params.U)
    for g, traj in enumerate(ctraj.groups):
        dcols[:, :, g * k : (g + 1) * k], grad_w[g] = reverse_sweep(
            traj, np.ascontiguousarray(phi[:, :, g * o : (g + 1) * o]), ledger
        )
    return fold(dcols, ctraj.x_shape, spec), chain_to_u(grad_w, params.U, GradMode.CHAIN)
