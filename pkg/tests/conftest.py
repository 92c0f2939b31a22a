"""Shared fixtures: keep the global tape and default dtype from leaking
between tests."""

import numpy as np
import pytest

from fgsplat import diffcore as dc


@pytest.fixture(autouse=True)
def _clean_tape():
    dc.get_tape().clear()
    yield
    dc.get_tape().clear()
    dc.set_default_dtype("float32")
