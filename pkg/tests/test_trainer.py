import numpy as np
import pytest
from numpy.testing import assert_array_equal

from nmfnet.errors import TrainingError
from nmfnet.models.network import build
from nmfnet.schemas.train import TrainConfig
from nmfnet.services.cifar import Dataset
from nmfnet.services.storage import load_checkpoint
from nmfnet.services.trainer import evaluate, fit


@pytest.fixture
def cfg():
    return TrainConfig(max_epochs=2, batch_size=16, val_fraction=0.25, lr0=1e-2, seed=5)


def test_fit_smoke(tmp_path, tiny_cnmf_config, tiny_dataset, cfg):
    model = build(tiny_cnmf_config, seed=1)
    report = fit(model, tiny_dataset, cfg, out_dir=tmp_path)

    assert len(report.epochs) == 2
    assert report.stopped_reason == "max_epochs"
    assert report.lr_trace == [1e-2, 1e-2]
    assert all(np.isfinite(e.train_loss) and np.isfinite(e.val_loss) for e in report.epochs)
    assert report.best_epoch in (1, 2)
    for name in ("best.ckpt", "report.csv", "summary.json"):
        assert (tmp_path / name).is_file()
    restored, optimizer = load_checkpoint(tmp_path / "best.ckpt")
    assert optimizer is not None and optimizer.step > 0
    assert restored.parameters().keys() == model.parameters().keys()


def test_fit_is_reproducible(tiny_cnmf_config, tiny_dataset, cfg):
    runs = []
    for _ in range(2):
        model = build(tiny_cnmf_config, seed=1)
        report = fit(model, tiny_dataset, cfg)
        runs.append(([e.train_loss for e in report.epochs], model.parameters()["block1.main.U"].copy()))
    assert runs[0][0] == runs[1][0]
    assert_array_equal(runs[0][1], runs[1][1])


def test_frozen_parameters_stay_put(tiny_cnmf_config, tiny_dataset, cfg):
    model = build(tiny_cnmf_config, seed=1)
    before = model.parameters()["block1.main.U"].copy()
    fit(model, tiny_dataset, cfg.model_copy(update={"max_epochs": 1}), frozen=["block1.main.U"])
    assert_array_equal(model.parameters()["block1.main.U"], before)


def test_fit_rejects_unknown_frozen_name(tiny_cnmf_config, tiny_dataset, cfg):
    with pytest.raises(TrainingError, match="unknown"):
        fit(build(tiny_cnmf_config), tiny_dataset, cfg, frozen=["nope.U"])


def test_nan_input_names_epoch_and_batch(tiny_cnmf_config, tiny_dataset, cfg):
    broken = Dataset(np.full_like(tiny_dataset.images, np.nan), tiny_dataset.labels)
    with pytest.raises(TrainingError, match="epoch 1 batch 0"):
        fit(build(tiny_cnmf_config), broken, cfg)


def test_without_validation_set_train_metrics_are_reported(tiny_cnmf_config, tiny_dataset, cfg):
    model = build(tiny_cnmf_config, seed=1)
    report = fit(model, tiny_dataset, cfg.model_copy(update={"val_fraction": 0.0, "max_epochs": 1}))
    assert report.epochs[0].val_loss == report.epochs[0].train_loss


def test_evaluate(tiny_cnmf_config, tiny_dataset):
    model = build(tiny_cnmf_config).train()
    loss_value, acc = evaluate(model, tiny_dataset, batch_size=10)
    assert np.isfinite(loss_value)
    assert 0.0 <= acc <= 1.0
    assert model.training
    with pytest.raises(TrainingError):
        evaluate(model, Dataset(tiny_dataset.images[:0], tiny_dataset.labels[:0]))
