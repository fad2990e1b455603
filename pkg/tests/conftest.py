# tests/conftest.py
import os

import numpy as np
import pytest

from app.cine_segmenter import SegmenterConfig
from app.config import Preset
from app.fusion import AllocationStrategy
from app.synthetic_cohort import CohortSpec, generate_cohort
from app.tensor import RngStream
from app.text_encoder import TextEncoderConfig
from app.training import TrainConfig, train_fusion, train_segmenter

TINY_COHORT = CohortSpec(n_clinical=60, n_cine=12, seed=7, cine_shape=(16, 16, 2))
TINY_SEGMENTER = SegmenterConfig(height=16, width=16, depth=2, patch_size=2, dims=(4, 8))
TINY_TEXT = TextEncoderConfig(max_len=32, width=16, blocks=1, ffn=32, pooled_dim=32)
TINY_TRAIN = TrainConfig(
    epochs=3,
    seg_epochs=2,
    batch_size=16,
    learning_rate=3e-3,
    seg_test_size=4,
    seg_batch_volumes=4,
    seed=7,
)


@pytest.fixture(autouse=True)
def clean_prtm_environment(monkeypatch):
    """Keep PRTM_* variables from the developer's shell out of every test"""
    for name in list(os.environ):
        if name.startswith("PRTM_"):
            monkeypatch.delenv(name)


@pytest.fixture
def rng():
    """Fresh seeded random stream"""
    return RngStream(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_preset():
    """Preset small enough to train in seconds"""
    return Preset(name="tiny", cohort=TINY_COHORT, segmenter=TINY_SEGMENTER, text=TINY_TEXT, train=TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_cohort():
    """60-patient cohort with 12 cine volumes of 16x16x2"""
    return generate_cohort(TINY_COHORT)


@pytest.fixture(scope="session")
def segmentation_run(tiny_cohort):
    return train_segmenter(tiny_cohort, TINY_SEGMENTER, TINY_TRAIN)


@pytest.fixture(scope="session")
def fusion_run(tiny_cohort, segmentation_run):
    """Tri-modal self-attention fusion model trained on the tiny cohort"""
    return train_fusion(
        tiny_cohort, TINY_TRAIN, TINY_TEXT, AllocationStrategy.self_reasoning(), ("text", "cine", "numeric"),
        segmentation_run.segmenter,
    )
