"""Session fixtures for the adapter suite."""

from __future__ import annotations

import pytest

from kbrag_adapter.model import CausalBackbone

from tiny_model import make_backbone


@pytest.fixture(scope="session")
def backbone() -> CausalBackbone:
    return make_backbone()
