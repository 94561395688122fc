import numpy as np
import pytest

from sebpool.data import Dataset, gen_dataset, make_rng
from sebpool.gcp import GcpConfig
from sebpool.training import TrainConfig, TrainReport, train
from sebpool.gradcheck import random_spsd, conditioned_feature_map


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def spsd(rng):
    """Factory of eigengapped SPD matrices"""
    def make(d: int, **kwargs) -> np.ndarray:
        return random_spsd(rng, d, **kwargs)
    return make


@pytest.fixture
def feature_map(rng):
    """Factory of d x N feature maps whose covariance has a prescribed spectrum"""
    def make(d: int, n: int, spectrum=None) -> np.ndarray:
        if spectrum is None:
            spectrum = np.linspace(3.0, 0.2, d)
        return conditioned_feature_map(rng, d, n, spectrum)
    return make


@pytest.fixture(scope="session")
def toy_runs():
    """Fully trained toy runs keyed by (dataset seed, SEB on/off). Each one is trained
    on first use and shared by every slow test that asks for it"""
    runs = {}

    def get(seed: int, use_seb: bool = True) -> tuple[Dataset, TrainReport]:
        if (seed, use_seb) not in runs:
            dataset = gen_dataset(seed=seed)
            report = train(dataset, GcpConfig(use_seb=use_seb), TrainConfig(seed=seed))
            runs[seed, use_seb] = dataset, report
        return runs[seed, use_seb]

    return get
