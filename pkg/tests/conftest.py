import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cptr.model import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=1, d_ff=8, max_seq_len=6, seed=0)


def pytest_terminal_summary(terminalreporter):
    lines = [line for name, mod in list(sys.modules.items())
             if name.endswith("test_acceptance") for line in getattr(mod, "VERDICTS", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
