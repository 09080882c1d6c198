from __future__ import annotations

import pytest


@pytest.fixture(autouse=True)
def _isolated_env(tmp_path_factory, monkeypatch):
    """Keep the disk cache out of the home directory and ignore a shell seed."""
    monkeypatch.setenv("THERMOTRACK_CACHE_DIR", str(tmp_path_factory.mktemp("cache")))
    monkeypatch.delenv("THERMOTRACK_SEED", raising=False)
    monkeypatch.delenv("THERMOTRACK_OUTPUT_DIR", raising=False)
