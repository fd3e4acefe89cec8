"""Shared fixtures."""

import numpy as np
import pytest

from characteristics import IntegratorSettings
from domain_geometry import Ball, Ellipsoid
from external_field import get_field


@pytest.fixture
def ball():
    return Ball(1.0)


@pytest.fixture
def ellipsoid():
    return Ellipsoid((2.0, 1.0, 1.0))


@pytest.fixture
def radial_field():
    return get_field('radial')


@pytest.fixture
def zero_field():
    return get_field('zero')


@pytest.fixture
def constant_field():
    return get_field('constant')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def settings():
    return IntegratorSettings()
