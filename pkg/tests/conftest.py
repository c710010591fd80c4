import copy

import pytest

from obpuf import tuning


@pytest.fixture(autouse=True)
def _restore_tuning():
    """Config files may carry a tuning block; keep it from leaking between tests."""
    saved = {key: copy.deepcopy(value) for key, value in vars(tuning).items() if key.isupper()}
    yield
    for key, value in saved.items():
        setattr(tuning, key, value)
