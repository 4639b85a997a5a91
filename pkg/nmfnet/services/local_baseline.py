"""
Local-learning baseline: every CNMF layer gets an unsupervised dictionary
learned greedily, layer by layer, with classic NMF on its own input patches.
Those weights are then frozen and only the remaining layers are trained.
"""
from typing import Optional

import numpy as np
import structlog

from ..core.tensor import unfold
from ..models.layers import Cnmf
from ..models.network import Model
from ..schemas.experiments import LocalBaselineResult
from ..schemas.train import TrainConfig
from .augment import transform_batch
from .cifar import Dataset
from .classic_nmf import factorize
from .nmf_layer import normalize_input
from .trainer import evaluate, fit

log = structlog.get_logger(__name__)

PRETRAIN_IMAGES = 512
MAX_PATCHES = 4096


def _layer_inputs(model: Model, upto: int, x: np.ndarray) -> np.ndarray:
    """Input of layer `upto`, computed with batch statistics; BN buffers are
    restored afterwards."""
    saved = {k: v.copy() for k, v in model.buffers().items()}
    out = x
    for layer in model.layers[:upto]:
        out = layer.forward(out, True)
    for k, v in model.buffers().items():
        v[...] = saved[k]
    return out


def pretrain_nmf_layers(
    model: Model,
    images: np.ndarray,
    iters: int = 100,
    max_patches: int = MAX_PATCHES,
    seed: int = 0,
) -> dict[str, float]:
    """Replace U of every CNMF layer by a classic-NMF patch dictionary.

    Returns the final KL divergence of each factorization, keyed by layer name.
    """
    rng = np.random.default_rng(seed)
    divergences = {}
    for index, layer in enumerate(model.layers):
        if not isinstance(layer, Cnmf):
            continue
        spec = layer.spec
        patches = unfold(_layer_inputs(model, index, images), spec)
        patches = patches.reshape(-1, patches.shape[-1])
        if len(patches) > max_patches:
            patches = patches[rng.choice(len(patches), max_patches, replace=False)]
        k = spec.patch_size
        group_kl = []
        for g in range(spec.groups):
            x_norm, _ = normalize_input(patches[:, g * k : (g + 1) * k])
            fac = factorize(x_norm, spec.out_per_group, iters=iters, seed=seed + g)
            # W is already non-negative and column-normalized, so derive_w(W) == W
            layer.params["U"][g] = fac.W
            group_kl.append(fac.divergence_history[-1])
        name = f"{layer.name}.U"
        divergences[name] = float(np.mean(group_kl))
        log.info("dictionary learned", layer=layer.name, patches=len(patches), divergence=divergences[name])
    return divergences


def run_local_baseline(
    model: Model,
    train: Dataset,
    test: Dataset,
    cfg: Optional[TrainConfig] = None,
    iters: int = 100,
    backprop_accuracy: Optional[float] = None,
) -> LocalBaselineResult:
    cfg = cfg or TrainConfig()
    sample = train.images[:PRETRAIN_IMAGES]
    sample = transform_batch(sample, training=False) if sample.shape[1:] != tuple(model.config.input_shape) else sample
    divergences = pretrain_nmf_layers(model, sample.astype(model.dtype), iters=iters, seed=cfg.seed)
    frozen = list(divergences)
    fit(model, train, cfg, frozen=frozen)
    accuracy = evaluate(model, test, cfg.alpha, cfg=cfg)[1]
    log.info("local baseline finished", accuracy=accuracy, backprop_accuracy=backprop_accuracy)
    return LocalBaselineResult(
        local_accuracy=accuracy,
        backprop_accuracy=backprop_accuracy,
        frozen=frozen,
        dictionary_divergence=divergences,
    )
