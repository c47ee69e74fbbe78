import sys

import numpy as np
import pytest
import torch

from ged.data import GridDomain, SequenceDataset, fit_normalization
from ged.synth import SynthConfig, synth_generate

torch.set_num_threads(1)

SMALL_DOMAIN = GridDomain(full_size=(24, 28), crop_size=(16, 16))


@pytest.fixture(scope="session")
def small_store(tmp_path_factory):
    """Synthetic store spanning the 2020/2021 boundary on a small grid."""
    cfg = SynthConfig(domain=SMALL_DOMAIN, n_hours=600, seed=5, start="2020-12-20T00")
    return synth_generate(tmp_path_factory.mktemp("small_store"), cfg)


@pytest.fixture(scope="session")
def small_stats(small_store):
    return fit_normalization(small_store, (2020, 2020))


@pytest.fixture(scope="session")
def small_train(small_store, small_stats):
    return SequenceDataset(small_store, small_stats, (2020, 2020), "none").materialize()


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def toy_denoiser(small_train):
    """A small noise predictor trained briefly on the synthetic store."""
    from ged.train import TrainConfig, denoiser_spec, train_diffusion

    spec = denoiser_spec(small_train.cond.shape[-1], (16, 16), widths=(8, 16))
    cfg = TrainConfig(batch_size=4, epochs=1, steps_per_epoch=150, learning_rate=1e-3, log_every=0)
    model, _ = train_diffusion(small_train, cfg, spec)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
