import numpy as np
import pytest

from nmfnet.log import configure_logging
from nmfnet.models.enums import BlockKind
from nmfnet.services.cifar import Dataset
from nmfnet.services.gradcheck import tiny_config

configure_logging("WARNING")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cnmf_config():
    """Two blocks on a 2x7x7 input, three classes, one NMF iteration."""
    return tiny_config(BlockKind.CNMF)


@pytest.fixture
def tiny_dataset(rng):
    """48 images already in the tiny model's input geometry, 16 per class."""
    labels = np.repeat(np.arange(3), 16)
    images = rng.uniform(0.0, 1.0, (48, 2, 7, 7))
    # class-dependent brightness in the first channel
    images[:, 0] += labels[:, None, None] * 0.5
    return Dataset(images, labels, "train")
