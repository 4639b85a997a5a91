"""
Training loop: Adam on every trainable tensor (U for NMF layers), plateau
learning-rate schedule, augmentation and best-validation checkpointing.

Randomness comes from one SeedSequence per run, spawned into independent
streams for the validation split, batch order and augmentation, so a run is
reproducible from (seed, config, data).
"""
import time
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import structlog

from ..config import settings
from ..errors import NonFiniteError, TrainingError
from ..models.network import Model
from ..schemas.network import LossConfig
from ..schemas.train import EpochRecord, TrainConfig, TrainingReport
from .augment import transform_batch
from .cifar import Dataset, stratified_split
from .loss import accuracy, loss, loss_grad
from .nmf_layer import derive_w
from .optim import AdamState, PlateauScheduler, adam_step
from .storage import StorageService, save_checkpoint

log = structlog.get_logger(__name__)

EVAL_BATCH = 256


def _inputs(model: Model, images: np.ndarray, rng: Optional[np.random.Generator], cfg: TrainConfig, training: bool):
    """Batch in the model's input geometry; images already at that size pass through."""
    target = tuple(model.config.input_shape)
    if tuple(images.shape[1:]) != target:
        images = transform_batch(images, rng, cfg.augment, training=training)
        if tuple(images.shape[1:]) != target:
            raise TrainingError(f"images {images.shape[1:]} do not match model input {target}")
    return images.astype(model.dtype, copy=False)


def evaluate(
    model: Model,
    dataset: Dataset,
    alpha: float = 0.5,
    batch_size: int = EVAL_BATCH,
    cfg: Optional[TrainConfig] = None,
) -> tuple[float, float]:
    """Mean loss and accuracy in eval mode (center crop, running BN stats)."""
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    cfg = cfg or TrainConfig()
    was_training = model.training
    model.eval()
    loss_cfg = LossConfig(alpha=alpha)
    total_loss = total_correct = 0.0
    try:
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            logits = model.forward(_inputs(model, images, None, cfg, training=False))
            total_loss += loss(logits, labels, loss_cfg) * len(labels)
            total_correct += accuracy(logits, labels) * len(labels)
    finally:
        model.training = was_training
    return total_loss / len(dataset), total_correct / len(dataset)


def _check_nmf_constraints(model: Model) -> None:
    for layer in model.nmf_layers():
        W = derive_w(layer.params["U"])
        if W.min() < 0 or not np.allclose(W.sum(axis=-2), 1.0):
            raise TrainingError(f"{layer.name}: derived W left the simplex")


def fit(
    model: Model,
    dataset: Dataset,
    cfg: Optional[TrainConfig] = None,
    val: Optional[Dataset] = None,
    frozen: Iterable[str] = (),
    out_dir: Union[str, Path, None] = None,
) -> TrainingReport:
    """Train `model` in place and return the per-epoch report.

    Without an explicit `val` set, a stratified `cfg.val_fraction` of
    `dataset` is held out. With `out_dir`, the best-validation checkpoint is
    written to best.ckpt and the report to report.csv / summary.json.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise TrainingError("training set is empty")
    frozen = set(frozen)
    unknown = frozen - set(model.parameters())
    if unknown:
        raise TrainingError(f"cannot freeze unknown parameters {sorted(unknown)}")

    split_seq, order_seq, augment_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    if val is None and cfg.val_fraction > 0:
        dataset, val = stratified_split(dataset, cfg.val_fraction, int(split_seq.generate_state(1)[0]))
    order_rng = np.random.default_rng(order_seq)
    augment_rng = np.random.default_rng(augment_seq)
    if len(dataset) == 0:
        raise TrainingError("training split is empty")

    out = Path(out_dir) if out_dir is not None else None
    storage = StorageService(out) if out is not None else None
    loss_cfg = LossConfig(alpha=cfg.alpha)
    optimizer = AdamState.for_params(model.parameters())
    scheduler = PlateauScheduler.from_config(cfg)
    report = TrainingReport()
    started = time.perf_counter()
    lr = scheduler.lr

    log.info(
        "training started",
        n_train=len(dataset),
        n_val=len(val) if val is not None else 0,
        parameters=model.parameter_count(),
        frozen=sorted(frozen),
    )
    for epoch in range(1, cfg.max_epochs + 1):
        epoch_start = time.perf_counter()
        model.train()
        order = order_rng.permutation(len(dataset))
        seen = 0
        sum_loss = sum_correct = 0.0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            labels = dataset.labels[idx]
            x = _inputs(model, dataset.images[idx], augment_rng, cfg, training=True)
            try:
                logits = model.forward(x)
                batch_loss = loss(logits, labels, loss_cfg)
                if not np.isfinite(batch_loss):
                    raise NonFiniteError("loss")
                model.backward(loss_grad(logits, labels, loss_cfg))
                adam_step(model.parameters(), model.gradients(), optimizer, lr, frozen)
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch} batch {batch} (lr={lr:g}): {e}") from e
            if settings.DEBUG_CHECKS:
                _check_nmf_constraints(model)
            seen += len(idx)
            sum_loss += batch_loss * len(idx)
            sum_correct += accuracy(logits, labels) * len(idx)

        train_loss, train_acc = sum_loss / seen, sum_correct / seen
        if val is not None and len(val):
            val_loss, val_acc = evaluate(model, val, cfg.alpha, cfg=cfg)
        else:
            val_loss, val_acc = train_loss, train_acc

        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            train_acc=train_acc,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr,
            seconds=time.perf_counter() - epoch_start,
        )
        report.epochs.append(record)
        report.lr_trace.append(lr)
        log.info("epoch", **record.model_dump())

        if report.best_val_loss is None or val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, optimizer)

        step = scheduler.step(val_loss)
        lr = step.lr
        if step.stop:
            report.stopped_reason = step.reason
            break
    else:
        report.stopped_reason = "max_epochs"

    report.wall_seconds = time.perf_counter() - started
    if storage is not None:
        storage.save_run(out, report)
    log.info(
        "training finished",
        epochs=len(report.epochs),
        best_epoch=report.best_epoch,
        best_val_loss=report.best_val_loss,
        reason=report.stopped_reason,
    )
    return report
