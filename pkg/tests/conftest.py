import pytest

from src.data_transformation.synthetic import SynthesisSpec, synthesize_dataset
from src.model.ensemble import EnsembleModel
from tests.helpers import make_small_manifest, tiny_member


@pytest.fixture(scope="session")
def small_manifest():
    return make_small_manifest()


@pytest.fixture(scope="session")
def small_spec():
    return SynthesisSpec(n_subjects=4, trials_per_subject=1, duration_s=20.0)


@pytest.fixture(scope="session")
def small_dataset(small_manifest, small_spec):
    return synthesize_dataset(small_spec, small_manifest, seed=7)


@pytest.fixture
def tiny_ensemble():
    return EnsembleModel([tiny_member(seed=11)])
