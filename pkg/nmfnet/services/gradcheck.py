"""
Gradient checks on seeded random instances.

    unrolled_vs_fd      exact reverse sweep against central differences of the
                        full N-step forward
    approx_vs_unrolled  one-step backward against the exact one at N = 1
                        (chain mode, where both are derivatives of the same map)
    cosine              agreement of the one-step and exact input errors at
                        the layer default N; reported, not thresholded
    network_*           whole-model gradients of tiny networks
"""
from typing import Callable, Optional

import numpy as np
import structlog

from ..config import settings
from ..models.enums import BackwardEngine, BlockKind, GradMode
from ..models.network import Model, build
from ..schemas.api import GradcheckResponse, GradcheckRow
from ..schemas.network import BlockConfig, NetworkConfig
from .backprop import nmf_backward, unrolled_backward
from .loss import loss, loss_grad
from .nmf_layer import NmfParams, derive_w, nmf_forward

log = structlog.get_logger(__name__)

FD_STEP = 1e-6
FD_TOL = 1e-4
ONE_STEP_TOL = 1e-10
NETWORK_FD_TOL = 1e-5
NETWORK_N1_TOL = 1e-8


def rel_err(a: np.ndarray, b: np.ndarray, scale: float = 0.0) -> float:
    """max|a - b| / max(max|b|, scale, 1e-12).

    `scale` is the natural magnitude of the quantity; a reference that is
    exactly zero (U-gradient of a single-latent layer) is then compared in
    absolute terms instead of against its own round-off.
    """
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), scale, 1e-12))


def error_scale(phi: np.ndarray) -> float:
    """Absolute floor for comparing gradients of sum(phi * h); h lies on the simplex."""
    return float(np.max(np.abs(phi)))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel(), b.ravel()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 1.0


def central_difference(
    f: Callable[[], float],
    x: np.ndarray,
    step: float = FD_STEP,
    coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """d f / d x by central differences, perturbing `x` in place.

    With `coords` (flat indices) only those entries are estimated; the rest
    of the result is zero.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size) if coords is None else coords:
        orig = flat[k]
        flat[k] = orig + step
        up = f()
        flat[k] = orig - step
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return grad


def random_instance(rng: np.random.Generator, S: int, I: int, batch: int = 3):
    x = rng.uniform(0.05, 1.0, (batch, S))
    U = NmfParams.init(S, I, rng).U
    phi = rng.standard_normal((batch, I))
    return x, U, phi


def unrolled_vs_fd(rng: np.random.Generator, S: int, I: int, n_iters: int, epsilon: float = 1.0):
    x, U, phi = random_instance(rng, S, I)
    objective = lambda: float(np.sum(phi * nmf_forward(x, derive_w(U), n_iters, epsilon).h))
    phi_in, grad_u = unrolled_backward(x, U, n_iters, epsilon, phi)
    scale = error_scale(phi)
    return (
        rel_err(phi_in, central_difference(objective, x), scale),
        rel_err(grad_u, central_difference(objective, U), scale),
    )


def approx_vs_unrolled(rng: np.random.Generator, S: int, I: int, n_iters: int, mode: GradMode = GradMode.CHAIN):
    """(rel. err of phi_in, rel. err of grad_u, cosine of phi_in, cosine of grad_u)."""
    x, U, phi = random_instance(rng, S, I)
    params = NmfParams(U)
    state = nmf_forward(x, params, n_iters, 1.0)
    signal = nmf_backward(phi, state, params, mode)
    phi_exact, grad_exact = unrolled_backward(x, U, n_iters, 1.0, phi)
    scale = error_scale(phi)
    return (
        rel_err(signal.phi_in, phi_exact, scale),
        rel_err(signal.grad_u, grad_exact, scale),
        cosine(signal.phi_in, phi_exact),
        cosine(signal.grad_u, grad_exact),
    )


def tiny_config(kind: BlockKind, **kwargs) -> NetworkConfig:
    """Two blocks, 4 then 3 channels, on a 2x7x7 input."""
    return NetworkConfig(
        blocks=[
            BlockConfig(kind=kind, out_channels=4, kernel=(3, 3), stride=2, batch_norm=True, nmf_iters=1),
            BlockConfig(kind=BlockKind.CNN, out_channels=3, kernel=(3, 3), batch_norm=False),
        ],
        input_shape=(2, 7, 7),
        class_count=3,
        **kwargs,
    )


def _model_grads(model: Model, x: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    model.train().zero_grad()
    logits = model.forward(x)
    return {k: v.copy() for k, v in model.backward(loss_grad(logits, labels)).items()}


def network_cnn_vs_fd(rng: np.random.Generator, samples: int = 8) -> float:
    model = build(tiny_config(BlockKind.CNN), seed=int(rng.integers(2**31)))
    x = rng.uniform(0.0, 1.0, (4, 2, 7, 7))
    labels = rng.integers(0, 3, 4)
    grads = _model_grads(model, x, labels)
    objective = lambda: loss(model.forward(x), labels)
    analytic, numeric = [], []
    for name, p in model.parameters().items():
        coords = rng.choice(p.size, size=min(samples, p.size), replace=False)
        fd = central_difference(objective, p, coords=coords)
        analytic.append(grads[name].reshape(-1)[coords])
        numeric.append(fd.reshape(-1)[coords])
    # relative to the whole gradient: biases ahead of batch norm have none
    return rel_err(np.concatenate(analytic), np.concatenate(numeric))


def network_cnmf_n1(rng: np.random.Generator) -> float:
    seed = int(rng.integers(2**31))
    approx = build(tiny_config(BlockKind.CNMF, grad_mode=GradMode.CHAIN), seed=seed)
    exact = build(tiny_config(BlockKind.CNMF, backward=BackwardEngine.UNROLLED), seed=seed)
    x = rng.uniform(0.0, 1.0, (4, 2, 7, 7))
    labels = rng.integers(0, 3, 4)
    ga, ge = _model_grads(approx, x, labels), _model_grads(exact, x, labels)
    return rel_err(np.concatenate([ga[k].ravel() for k in ga]), np.concatenate([ge[k].ravel() for k in ga]))


def run_gradcheck(instances: int = 5, seed: int = 0, n_iters: Optional[int] = None) -> GradcheckResponse:
    rng = np.random.default_rng(seed)
    n_iters = settings.NMF_ITERS if n_iters is None else n_iters

    fd_phi, fd_grad, n1_phi, n1_grad, cos_direct, cos_chain = [], [], [], [], [], []
    for _ in range(instances):
        S, I = int(rng.integers(2, 9)), int(rng.integers(1, 7))
        e_phi, e_grad = unrolled_vs_fd(rng, S, I, int(rng.integers(1, 31)))
        fd_phi.append(e_phi)
        fd_grad.append(e_grad)
        e_phi, e_grad, _, _ = approx_vs_unrolled(rng, S, I, 1)
        n1_phi.append(e_phi)
        n1_grad.append(e_grad)
        cos_chain.append(approx_vs_unrolled(rng, S, I, n_iters, GradMode.CHAIN)[2])
        cos_direct.append(approx_vs_unrolled(rng, S, I, n_iters, GradMode.DIRECT)[3])

    def row(layer, mode, check, errors, tol):
        worst = max(errors)
        return GradcheckRow(layer=layer, mode=mode, check=check, max_rel_err=worst, tolerance=tol, passed=worst < tol)

    rows = [
        row("nmf", "chain", "unrolled_vs_fd:phi", fd_phi, FD_TOL),
        row("nmf", "chain", "unrolled_vs_fd:grad", fd_grad, FD_TOL),
        row("nmf", "chain", "approx_vs_unrolled_n1:phi", n1_phi, ONE_STEP_TOL),
        row("nmf", "chain", "approx_vs_unrolled_n1:grad", n1_grad, ONE_STEP_TOL),
        GradcheckRow(layer="nmf", mode="chain", check=f"cosine_n{n_iters}:phi", cosine=float(np.mean(cos_chain))),
        GradcheckRow(layer="nmf", mode="direct", check=f"cosine_n{n_iters}:grad", cosine=float(np.mean(cos_direct))),
        row("network", "exact", "network_cnn_vs_fd", [network_cnn_vs_fd(rng)], NETWORK_FD_TOL),
        row("network", "chain", "network_cnmf_n1", [network_cnmf_n1(rng)], NETWORK_N1_TOL),
    ]
    passed = all(r.passed for r in rows)
    log.info("gradcheck finished", instances=instances, seed=seed, passed=passed)
    return GradcheckResponse(passed=passed, rows=rows)


def format_rows(rows: list[GradcheckRow]) -> str:
    header = f"{'layer':<8} {'mode':<7} {'check':<28} {'max_rel_err':>12} {'cosine':>8} {'ok':>3}"
    lines = [header, "-" * len(header)]
    for r in rows:
        err = f"{r.max_rel_err:.3g}" if r.max_rel_err is not None else "-"
        cos = f"{r.cosine:.3f}" if r.cosine is not None else "-"
        lines.append(f"{r.layer:<8} {r.mode:<7} {r.check:<28} {err:>12} {cos:>8} {'yes' if r.passed else 'NO':>3}")
    return "\n".join(lines)
