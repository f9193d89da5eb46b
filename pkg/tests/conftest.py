import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("membench", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("membench")


@pytest.fixture(autouse=True)
def _native_cache(tmp_path_factory, monkeypatch):
    # one compiled-library cache per test session, never the user's home
    root = tmp_path_factory.getbasetemp() / "native-cache"
    monkeypatch.setenv("MEMBENCH_CACHE_DIR", str(root))
    monkeypatch.delenv("MEMBENCH_BACKEND", raising=False)
    yield
