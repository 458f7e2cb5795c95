import numpy as np
import pytest

from wigtype import VarianceProfile, compute_spectral_data


def msc(z):
    """Stieltjes transform of the semicircle law, Herglotz branch."""
    z = np.asarray(z, dtype=complex)
    return (-z + np.sqrt(z - 2.0) * np.sqrt(z + 2.0)) / 2.0


def semicircle_cdf(e):
    e = np.clip(e, -2.0, 2.0)
    return 0.5 + e * np.sqrt(4.0 - e * e) / (4.0 * np.pi) + np.arcsin(e / 2.0) / np.pi


@pytest.fixture(scope="session")
def const64():
    return VarianceProfile.constant(64)


@pytest.fixture(scope="session")
def goe128():
    return VarianceProfile.goe(128)


@pytest.fixture(scope="session")
def two_block():
    return VarianceProfile.blocks((32, 96), [[2.0, 0.5], [0.5, 2.0]], name="two-block")


@pytest.fixture(scope="session")
def three_block():
    return VarianceProfile.blocks(
        (32, 32, 64),
        [[1.0, 2.0, 0.5], [2.0, 1.0, 1.0], [0.5, 1.0, 2.0]],
        name="three-block",
    )


@pytest.fixture(scope="session")
def sd_const64(const64):
    return compute_spectral_data(const64)


@pytest.fixture(scope="session")
def sd_two_block(two_block):
    return compute_spectral_data(two_block)


@pytest.fixture(scope="session")
def sd_three_block(three_block):
    return compute_spectral_data(three_block)
