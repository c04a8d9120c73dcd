from pathlib import Path

import numpy as np
import pytest

from xplain_bench.corpus import filter_correct, generate_synthetic_corpus
from xplain_bench.nn import random_model
from xplain_bench.pipeline import build_fixture_model

FIXTURES = Path(__file__).parent / "fixtures"

FIVE_LAYER = (("conv", 6, 3, 1, 1), ("relu",), ("maxpool", 2, 2), ("flatten",), ("dense", 10))
ALL_KINDS = (
    ("conv", 4, 3, 2, 1), ("relu",), ("avgpool", 2, 2),
    ("conv", 8, 3, 1, 0), ("relu",), ("gap",), ("dense", 10),
)
ZERO_BIAS_DEEP = (
    ("conv", 6, 3, 1, 1), ("relu",), ("conv", 8, 3, 1, 1), ("relu",), ("maxpool", 2, 2),
    ("flatten",), ("dense", 16), ("relu",), ("dense", 10),
)


def make_model(spec, seed=0, shape=(3, 16, 16), bias_scale=0.1, mean=(0.5, 0.4, 0.3), std=(0.25, 0.3, 0.2)):
    return random_model(spec, shape, 10, seed=seed, mean=mean, std=std, bias_scale=bias_scale)


def random_image(rng, h=16, w=16):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def five_layer():
    return make_model(FIVE_LAYER, seed=3)


@pytest.fixture
def all_kinds_net():
    return make_model(ALL_KINDS, seed=4)


@pytest.fixture(scope="session")
def trained():
    """(model, training corpus, training accuracy) for the synthetic fixture."""
    return build_fixture_model(seed=0, n=200)


@pytest.fixture(scope="session")
def eval_images(trained):
    model = trained[0]
    kept = filter_correct(model, generate_synthetic_corpus(101, 90))
    return kept
