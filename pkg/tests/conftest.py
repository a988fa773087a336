"""Shared fixtures for the Impatient Networks test suite."""

import numpy as np
import pytest

from src.models.schemas import ArchitectureConfig, HeadKind, HeadSpec, LayerSpec, LayerType
from src.services.data import SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, Dataset, concat, make_scale_cue_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# Architectures
# =============================================================================


@pytest.fixture
def tiny_architecture():
    """Two conv blocks on 6x6 inputs, three classes, one AVG head per block."""
    return ArchitectureConfig(input_shape=(1, 6, 6), num_classes=3, channels=[2, 3], batchnorm=True)


@pytest.fixture
def three_head_architecture():
    """Conv-ReLU stack without pooling so every head sees an 8x8 map."""
    layers = [
        LayerSpec(type=LayerType.CONV, out_channels=2, kernel_size=3, padding=1),
        LayerSpec(type=LayerType.RELU),
        LayerSpec(type=LayerType.CONV, out_channels=3, kernel_size=3, padding=1),
        LayerSpec(type=LayerType.RELU),
        LayerSpec(type=LayerType.CONV, out_channels=3, kernel_size=3, padding=1),
        LayerSpec(type=LayerType.RELU),
    ]
    heads = [
        HeadSpec(attach_point=1, kind=HeadKind.AVG),
        HeadSpec(attach_point=3, kind=HeadKind.AVG4X4),
        HeadSpec(attach_point=5, kind=HeadKind.FC_ONLY),
    ]
    return ArchitectureConfig(input_shape=(1, 8, 8), num_classes=4, layers=layers, heads=heads)


def mlp_architecture(in_shape=(1, 4, 4), hidden=(8,), num_classes=2):
    """FC-ReLU stack with an FC-only head after every ReLU."""
    layers = []
    heads = []
    for width in hidden:
        layers.append(LayerSpec(type=LayerType.FC, out_features=width))
        layers.append(LayerSpec(type=LayerType.RELU))
        heads.append(HeadSpec(attach_point=len(layers) - 1, kind=HeadKind.FC_ONLY))
    return ArchitectureConfig(input_shape=in_shape, num_classes=num_classes, layers=layers, heads=heads)


# =============================================================================
# Data
# =============================================================================


def separable_dataset(n_per_class=50, seed=0, split=SPLIT_TRAIN):
    """Two classes with pixel means -1 and +1 on 1x4x4 images."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class)
    images = (2.0 * labels - 1.0)[:, None, None, None] + 0.3 * rng.standard_normal((2 * n_per_class, 1, 4, 4))
    order = rng.permutation(len(labels))
    return Dataset.create(images[order], labels[order], 2, split)


@pytest.fixture
def toy_dataset():
    return separable_dataset()


@pytest.fixture
def small_scale_cue():
    """Tiny synthetic train/val/test dataset on 8x8 images with 4 classes."""
    params = dict(image_size=8, num_coarse=2, num_fine=2, noise=0.2)
    train = make_scale_cue_dataset(n_per_class=8, seed=0, split=SPLIT_TRAIN, **params)
    val = make_scale_cue_dataset(n_per_class=3, seed=1, split=SPLIT_VAL, **params)
    test = make_scale_cue_dataset(n_per_class=5, seed=2, split=SPLIT_TEST, **params)
    return concat([train, val, test])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
