import numpy as np
import pytest
import torch

from qsemcom.config import SystemConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg() -> SystemConfig:
    """Small-but-valid config: 32px images, 2 decoder stages, D=32."""
    cfg = SystemConfig()
    cfg.model.image_size = 32
    cfg.model.patch_size = 4
    cfg.model.embed_dim = 32
    cfg.model.backbone_depth = 4
    cfg.model.layer_selection = (2, 4)
    cfg.model.num_text_embeddings = 8
    cfg.quantizer.segment_length = 8
    cfg.quantizer.codeword_count = 16
    cfg.data.synthetic_n = 40
    cfg.train.batch_size = 4
    cfg.train.epochs_phase1 = 1
    cfg.train.epochs_phase2 = 1
    cfg.phy.calibration_trials = 1500
    cfg.train.snr_grid_db = (0.0, 10.0)
    return cfg.validate()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
