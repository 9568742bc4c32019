import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deskgan import fixtures, train  # noqa: E402


def style_fixture_config(**overrides):
    """A 16 px style model small enough to train in a few seconds on one core."""
    base = dict(image_size=16, latent_dim=32, style_channels=16, batch_size=8, epochs=8,
                kimg_per_phase=0.064, seed=0)
    base.update(overrides)
    return train.style_config(**base)


@pytest.fixture(scope="session")
def style_run(tmp_path_factory):
    """Trained 16x16 style generator, saved under a session temp dir."""
    outdir = tmp_path_factory.mktemp("style-run")
    result = train.train(style_fixture_config(), fixtures.cover_images(64, 16), outdir)
    return result, outdir / "network.dgck"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
