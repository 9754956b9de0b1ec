import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(int(os.environ.get("DIFFTEACH_THREADS", "1")))


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-gate report collected during the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "GATE_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance gates")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def schedule():
    from diffteach.schedules import build_schedule

    return build_schedule()


@pytest.fixture(scope="session")
def tiny_denoiser():
    """Small but real denoiser, randomly initialized (untrained)."""
    from diffteach.denoiser import DenoiserConfig, TinyUNet

    torch.manual_seed(7)
    return TinyUNet(DenoiserConfig(image_side=32, stage_channels=(4, 8, 8, 16), time_dim=16))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_boxset(rng, n, side=64, classes=(1, 2, 3), with_scores=False):
    from diffteach.boxes import BoxSet

    if n == 0:
        return BoxSet.empty(with_scores=with_scores)
    w = rng.uniform(4, side / 2, n)
    h = rng.uniform(4, side / 2, n)
    x = rng.uniform(0, side - w)
    y = rng.uniform(0, side - h)
    return BoxSet(
        boxes=np.stack([x, y, w, h], axis=1).astype(np.float32),
        labels=rng.choice(classes, n).astype(np.int64),
        scores=rng.uniform(0, 1, n).astype(np.float32) if with_scores else None,
    )
