import numpy as np
import pytest

from lmacnet import autodiff as ad


@pytest.fixture(autouse=True)
def _clean_autodiff_state():
    """Keep dtype/checked-mode changes from leaking between tests."""
    yield
    ad.set_default_dtype(np.float32)
    ad.set_checked(False)
