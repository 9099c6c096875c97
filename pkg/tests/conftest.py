import numpy as np
import pytest

import srfrn.tensor


@pytest.fixture(autouse=True)
def finite_checks():
    """Debug-build contract: every kernel output is checked for NaN/Inf."""
    old = srfrn.tensor.CHECK_FINITE
    srfrn.tensor.CHECK_FINITE = True
    yield
    srfrn.tensor.CHECK_FINITE = old


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def natural_images():
    """Real photographs bundled with scikit-image, as (name, uint8 array)."""
    skd = pytest.importorskip("skimage.data")
    names = ["astronaut", "camera", "coffee", "chelsea", "coins", "moon", "page", "text"]
    return [(name, getattr(skd, name)()) for name in names]
