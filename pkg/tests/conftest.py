import numpy as np
import pytest
from click.testing import CliRunner

from app import create_app
from cohort.synth import ModalitySynth, SynthSpec, synth_cohort
from engine.trainer import TrainConfig
from models import FeatureKind, FeatureSpec

TEST_CONFIG = {'SEED': 0, 'LOG_CONFIG': '', 'LOG_LEVEL': 'WARNING'}


@pytest.fixture
def app():
    return create_app(test_config=TEST_CONFIG, env='testing')


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def train_config(app):
    return TrainConfig.from_config(app.config)


def small_spec(n=60):
    return SynthSpec(n=n, latent_dim=4, censoring=0.3, modalities=[
        ModalitySynth('tabular', 5, weight=1.0, cell_missing=0.1, noise=0.3, categorical=1, ordinal=1,
                      cardinality=3),
        ModalitySynth('wsi', 6, weight=1.0, missing=0.4, noise=0.3),
    ])


@pytest.fixture
def cohort():
    return synth_cohort(small_spec(), seed=1)


@pytest.fixture
def mixed_specs():
    return [
        FeatureSpec('age'),
        FeatureSpec('stage', FeatureKind.ORDINAL),
        FeatureSpec('site', FeatureKind.CATEGORICAL, 3),
        FeatureSpec('dose'),
    ]


@pytest.fixture
def mixed_batch():
    rng = np.random.default_rng(7)
    values = rng.normal(size=(5, 4))
    values[:, 2] = rng.integers(0, 3, size=5)
    observed = rng.random((5, 4)) > 0.3
    observed[0] = True
    observed[1] = False
    return values, observed
