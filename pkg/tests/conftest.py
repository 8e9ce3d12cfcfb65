import os

import pytest


@pytest.fixture(autouse=True)
def _no_gscascade_env(monkeypatch):
    """Keep ambient GSCASCADE_* variables from leaking into config merging."""
    for key in list(os.environ):
        if key.startswith("GSCASCADE_"):
            monkeypatch.delenv(key)
