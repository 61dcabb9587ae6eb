"""Shared test fixtures and hypothesis settings."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from polyfuse import ModalityShape, ModelConfig, TrainSpec, generate_synthetic, make_folds
from polyfuse.data import FoldBundle

settings.register_profile(
    "ci",
    max_examples=50,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config the validators accept; cheap enough for training tests."""
    base = dict(
        modalities=(ModalityShape(1, 8), ModalityShape(1, 8)),
        cm_layers=1,
        sa_layers=1,
        cm_heads=1,
        sa_heads=1,
        model_dim=6,
        ffn_size=30,
        dropout=0.0,
        num_classes=3,
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


def tiny_spec(**overrides) -> TrainSpec:
    base = dict(epochs=2, batch_size=16, patience=10, seed=0)
    base.update(overrides)
    return TrainSpec(**base).validate()


def tiny_bundle(num_samples: int = 40, separability: float = 5.0,
                seed: int = 0) -> FoldBundle:
    """Fold 0 of a small two-modality synthetic dataset."""
    dataset = generate_synthetic(
        num_modalities=2, num_samples=num_samples, num_classes=3,
        channels=1, timesteps=8, separability=separability, seed=seed,
    )
    spec = make_folds(num_samples, seed=seed)[0]
    return FoldBundle(
        train=dataset.subset(spec.train_idx),
        val=dataset.subset(spec.val_idx),
        test=dataset.subset(spec.test_idx),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
