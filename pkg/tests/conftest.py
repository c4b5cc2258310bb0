"""Shared fixtures: a tiny two-organ scene, its corpus and a fast run config"""
import numpy as np
import pytest

from src.cosst.config import RunConfig
from src.cosst.core import ClassCatalog, GridImage, LabelMap
from src.cosst.synth import OrganSpec, SceneSpec, ShapeFamily, generate_corpus


@pytest.fixture
def catalog():
    return ClassCatalog(("liver", "kidney", "spleen"))


@pytest.fixture
def tiny_scene():
    return SceneSpec(
        height=24,
        width=24,
        seed=7,
        organs=[
            OrganSpec(class_k=1, name="left", shape=ShapeFamily.DISK, size=(3, 4),
                      anchor=(0.2, 0.2, 0.4, 0.4), intensity_mean=1.0, intensity_std=0.1),
            OrganSpec(class_k=2, name="right", shape=ShapeFamily.ELLIPSE, size=(3, 4),
                      anchor=(0.6, 0.6, 0.75, 0.75), intensity_mean=2.0, intensity_std=0.1),
        ],
    )


@pytest.fixture
def tiny_corpus(tiny_scene):
    return generate_corpus(tiny_scene, 10, [[1], [2]], names=["ds_a", "ds_b"])


@pytest.fixture
def tiny_config():
    return RunConfig(
        datasets=["unused.json"],
        seed=3,
        model={"m": 4, "hidden": 4, "kernel_size": 3},
        stage1={"base_lr": 0.05, "momentum": 0.9, "max_epochs": 2, "batch_size": 4, "eval_every": 1},
        stage2={"lr": 0.01, "momentum": 0.9, "epochs": 2, "batch_size": 4, "eval_every": 1,
                "max_iterations": 1},
    )


def random_image(rng, height=6, width=6, channels=1):
    return GridImage(rng.normal(size=(channels, height, width)))


def random_probs(rng, channels, height=6, width=6):
    logits = rng.normal(size=(channels, height, width))
    expo = np.exp(logits - logits.max(axis=0))
    return expo / expo.sum(axis=0)


def random_labels(rng, classes, height=6, width=6):
    return LabelMap(rng.choice(sorted(classes), size=(height, width)))
