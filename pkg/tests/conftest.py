import pytest

from spinband.model import Confinement, MixingFunction, ModelParams, validate


@pytest.fixture(scope="session")
def sk_mixing():
    """Two-body mixing r^2 / 8."""
    return MixingFunction((0.125,))


@pytest.fixture(scope="session")
def pure3_mixing():
    """Pure three-body mixing r^3 / 8."""
    return MixingFunction((0.0, 0.125))


@pytest.fixture(scope="session")
def mixed_mixing():
    """A genuinely mixed (2, 3) model."""
    return MixingFunction((0.0625, 0.0625))


@pytest.fixture(scope="session")
def sk_params(sk_mixing):
    """The standard two-body reference point used throughout the suite."""
    return validate(ModelParams(beta=1.0, q_star=1.0, q_o=0.5,
                                E_star=0.625, G_star=1.25,
                                confinement=Confinement.hard()),
                    sk_mixing)
