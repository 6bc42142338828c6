import numpy as np
import pytest

from hilight.harness.config import RunConfig, apply_overrides
from hilight.synthdata import build_dataset

TINY = {
    "epochs": "2",
    "batch_size": "8",
    "encoder.hidden_dim": "8",
    "encoder.layers": "2",
    "encoder.heads": "2",
    "encoder.proxies": "2",
    "encoder.proj_dim": "8",
    "encoder.image_size": "8",
    "data.ranges.image_size": "8",
    "data.ranges.frames": "2",
    "data.ranges.max_balls": "2",
    "lm.d_model": "8",
    "lm.heads": "2",
    "lm.layers": "1",
    "mining.d_video": "8",
    "mining.d_key": "8",
    "mining.d_lm": "8",
    "mining.heads": "2",
}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = tiny_config(root, root)
    build_dataset(root, 24, 3, 0.75, cfg.data.ranges)
    return root


def tiny_config(data_path, out, **extra) -> RunConfig:
    overrides = {**TINY, "data.path": str(data_path), "output_dir": str(out), **{k: str(v) for k, v in extra.items()}}
    return apply_overrides(RunConfig(), overrides)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
