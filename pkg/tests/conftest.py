"""Shared fixtures: tiny datasets and a fast trained checkpoint pair.

The full-scale controlled pair (the one the headline guidance-sweep
numbers come from) lives in test_acceptance and is session-scoped
there; module tests use the cheap fixtures here.
"""

import numpy as np
import pytest

from kaleido.data import sample_dataset, toy_gmm_default
from kaleido.latents.extract import extract_latent


@pytest.fixture(scope="session")
def gmm_spec():
    return toy_gmm_default(unequal=True)


@pytest.fixture(scope="session")
def equal_spec():
    return toy_gmm_default(unequal=False)


@pytest.fixture(scope="session")
def small_dataset(gmm_spec):
    return sample_dataset(gmm_spec, 256, seed=11)


@pytest.fixture(scope="session")
def small_latents(gmm_spec, small_dataset):
    return [extract_latent(s.x, s.class_id, "text", gmm_spec) for s in small_dataset]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
