"""
Unsupervised KL-divergence NMF with Lee-Seung multiplicative updates.

Shapes follow the row-per-pattern convention used throughout nmfnet:
X is [M, S] (M patterns of S inputs), W is [S, I] and H is [M, I], so the
reconstruction of pattern mu is R[mu] = W @ H[mu], i.e. R = H @ W.T.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import structlog

from ..config import settings
from ..core.tensor import Tensor, ensure_finite
from ..errors import DegenerateFactorError, NegativeInputError, ShapeError

log = structlog.get_logger(__name__)

INIT_LOW = 0.1
INIT_HIGH = 1.1


@dataclass
class Factorization:
    W: Tensor
    H: Tensor
    divergence_history: list[float] = field(default_factory=list)


def _check_shapes(X: Tensor, W: Tensor, H: Tensor) -> None:
    if X.ndim != 2 or W.ndim != 2 or H.ndim != 2:
        raise ShapeError("X, W and H must be 2-D")
    m, s = X.shape
    if W.shape[0] != s or H.shape[0] != m or W.shape[1] != H.shape[1]:
        raise ShapeError(f"incompatible shapes X{X.shape}, W{W.shape}, H{H.shape}")


def _check_nonnegative(**arrays: Tensor) -> None:
    for name, a in arrays.items():
        if np.any(a < 0):
            raise NegativeInputError(f"{name} has negative entries")


def _ratio(X: Tensor, R: Tensor) -> Tensor:
    """X / R with R floored at EPS_DIV; a positive X over a zero R is an error."""
    dead = (R == 0) & (X > 0)
    if np.any(dead):
        mu, s = np.argwhere(dead)[0]
        raise DegenerateFactorError(
            int(s), f"zero reconstruction for X[{mu}, {s}] > 0"
        )
    return X / np.maximum(R, settings.EPS_DIV)


def kl_divergence(X: Tensor, W: Tensor, H: Tensor, generalized: bool = False) -> float:
    """D(X || WH) = sum X ln(X / WH), with 0 ln(0/q) = 0.

    With generalized=True the Lee-Seung objective sum(WH) - sum(X) is added;
    both agree whenever the reconstruction mass equals the data mass.
    """
    _check_shapes(X, W, H)
    R = H @ W.T
    pos = X > 0
    if np.any(R[pos] <= 0):
        raise DegenerateFactorError(-1, "divergence undefined: zero reconstruction where X > 0")
    value = float(np.sum(X[pos] * np.log(X[pos] / R[pos])))
    if generalized:
        value += float(R.sum() - X.sum())
    return value


def update_h_classic(X: Tensor, W: Tensor, H: Tensor) -> Tensor:
    """h_i <- h_i sum_s W_si X_s / (sum_j W_sj h_j)."""
    _check_shapes(X, W, H)
    _check_nonnegative(X=X, W=W, H=H)
    ratio = _ratio(X, H @ W.T)
    return ensure_finite(H * (ratio @ W), "update_h_classic")


def update_w_classic(X: Tensor, W: Tensor, H: Tensor) -> Tensor:
    """Multiplicative KL update of W; follow with normalize_w.

    The per-column denominator sum_mu h_i only rescales column i, which the
    subsequent normalization removes; it is kept so that the unnormalized
    update already decreases the divergence.
    """
    _check_shapes(X, W, H)
    _check_nonnegative(X=X, W=W, H=H)
    ratio = _ratio(X, H @ W.T)
    denom = np.maximum(H.sum(axis=0), settings.EPS_DIV)
    return ensure_finite(W * (ratio.T @ H) / denom, "update_w_classic")


def normalize_w(W: Tensor) -> Tensor:
    """W_si <- W_si / sum_j W_ji, so every column sums to one."""
    sums = W.sum(axis=0)
    dead = np.flatnonzero(sums <= 0)
    if dead.size:
        raise DegenerateFactorError(int(dead[0]))
    return W / sums


def normalize_factors(W: Tensor, H: Tensor) -> tuple[Tensor, Tensor]:
    """normalize_w with H rescaled so the product H @ W.T is unchanged."""
    sums = W.sum(axis=0)
    return normalize_w(W), H * sums


def factorize(
    X: Tensor,
    n_components: int,
    iters: int = 200,
    seed: int = 0,
    tol: Optional[float] = None,
) -> Factorization:
    """Alternate h-update, W-update and normalization for `iters` rounds."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"X must be 2-D, got shape {X.shape}")
    if n_components < 1:
        raise ShapeError("n_components must be >= 1")
    _check_nonnegative(X=X)

    rng = np.random.default_rng(seed)
    m, s = X.shape
    W = rng.uniform(INIT_LOW, INIT_HIGH, size=(s, n_components))
    H = rng.uniform(INIT_LOW, INIT_HIGH, size=(m, n_components))
    W, H = normalize_factors(W, H)

    history: list[float] = []
    for round_ in range(iters):
        H = update_h_classic(X, W, H)
        W = update_w_classic(X, W, H)
        W, H = normalize_factors(W, H)
        history.append(kl_divergence(X, W, H))
        if tol is not None and round_ > 0:
            prev = history[-2]
            if abs(prev - history[-1]) <= tol * max(abs(prev), 1e-300):
                log.debug("factorize converged", round=round_, divergence=history[-1])
                break

    log.info(
        "factorization finished",
        rows=m,
        cols=s,
        components=n_components,
        rounds=len(history),
        divergence=history[-1] if history else None,
    )
    return Factorization(W=W, H=H, divergence_history=history)
