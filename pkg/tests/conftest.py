import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(tmp, **kw):
    """A dataset and model small enough to build and train in seconds."""
    from scanadapt.harness import ExperimentConfig

    base = dict(categories=("blocky", "table"), n_per_category=3, shape_resolution=32,
                label_uniform=256, label_surface=256, channels=(2, 3, 3), resolution=16,
                hidden=8, h_hidden=6, label_fraction=0.34, split_fractions=(0.34, 0.67),
                batch_size=2, points_per_sample=64, pretrain_steps=6, adapt_steps=8,
                checkpoint_every=4, ct_uniform=32, ct_near=32, n_eval=16, cd_samples=300,
                data_dir=str(Path(tmp) / "data"), run_dir=str(Path(tmp) / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    from scanadapt.harness import build_dataset

    tmp = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(tmp)
    build_dataset(cfg)
    return cfg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
