"""Shared fixtures. Session scope keeps the expensive ones to one build."""

import numpy as np
import pytest

from cabinpm.model import ModelConfig, TrainConfig, init_model, train, ForecastModel
from cabinpm.preprocess import PreprocessConfig, run_pipeline
from cabinpm.telemetry import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_frames():
    """Two hours of defaults-plus-seed synthetic telemetry."""
    return generate_synthetic(SynthConfig(seed=5, duration_s=7200))


@pytest.fixture(scope="session")
def small_dataset(small_frames):
    """Windowed dataset small enough for fast training in tests."""
    cfg = PreprocessConfig(lookback_s=120, horizon_s=30, window_stride_s=30, rng_seed=5)
    return run_pipeline(small_frames, cfg)


@pytest.fixture(scope="session")
def tiny_trained_model(small_dataset):
    """A briefly trained model over the small dataset, plus its report."""
    ds = small_dataset
    mcfg = ModelConfig(
        feature_dim=len(ds.feature_channels),
        target_dim=len(ds.target_channels),
        enc_hidden=6,
        dec_hidden=8,
        head_hidden=8,
        horizon=30,
        lookback=120,
        bidirectional=True,
        seed=3,
    )
    tcfg = TrainConfig(epochs=4, batch_size=16, alpha=2e-3, patience=4, shuffle_seed=3)
    params, report = train(init_model(mcfg), mcfg, ds, tcfg)
    fm = ForecastModel(params, mcfg, ds.norm, ds.feature_channels, ds.target_channels)
    return fm, report


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
