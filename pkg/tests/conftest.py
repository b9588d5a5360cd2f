import pytest
import torch

from advpatch.detectors import load_toy_detector
from advpatch.toydata import make_guide_image, make_toy_scenes


@pytest.fixture(scope="session")
def toy_detector():
    return load_toy_detector()


@pytest.fixture(scope="session")
def toy_scenes():
    # small fixed fixture set shared by the evaluation tests
    return make_toy_scenes(6, seed=11)


@pytest.fixture(scope="session")
def guide_32():
    return make_guide_image(32, seed=3)


@pytest.fixture()
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g
