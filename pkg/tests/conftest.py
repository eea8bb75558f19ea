import os
import tempfile
from pathlib import Path

# The CLI attaches a file handler at import time; keep test runs out of the repo.
os.environ.setdefault("DASM_LOG_FILE", os.path.join(tempfile.gettempdir(), "dasm-tests.log"))

import numpy as np
import pytest

from src.model_config import FrontendConfig, ModelConfig, RunConfig, load_run_config

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    """D=32, 4 heads, 32 mel frames -> T=16 fused frames, T_c=4."""
    return ModelConfig(
        dim=32,
        heads=4,
        backbone_blocks=1,
        decoder_blocks=1,
        conformer_blocks=1,
        conformer_kernel=3,
        patch_time=8,
        upsample_factor=4,
        cnn_channels=(4, 8),
        cnn_freq_pool=(2, 2),
        cnn_time_pool=(2, 1),
    )


@pytest.fixture
def tiny_frontend_cfg():
    return FrontendConfig(mel_bins=16)


@pytest.fixture
def smoke_cfg(tmp_path):
    return load_run_config(REPO_ROOT / "configs" / "smoke.yaml", {"output_dir": str(tmp_path / "run")})


@pytest.fixture
def default_cfg():
    return RunConfig()
