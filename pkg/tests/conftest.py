from __future__ import annotations

from pathlib import Path

import pytest

from seesay.adapters import AdapterSet
from seesay.gateway import load_scenario, scenario_corpus

REPO_ROOT = Path(__file__).resolve().parent.parent
KITCHEN_DIR = REPO_ROOT / "fixtures" / "kitchen"


@pytest.fixture
def kitchen_dir() -> Path:
    return KITCHEN_DIR


@pytest.fixture
def kitchen_scenario():
    return load_scenario(KITCHEN_DIR)


@pytest.fixture
def mock_adapters() -> AdapterSet:
    return AdapterSet.mocks()


@pytest.fixture
def kitchen_adapters(kitchen_scenario) -> AdapterSet:
    adapters = AdapterSet.mocks()
    descriptions, transcripts = scenario_corpus(kitchen_scenario)
    adapters.register_corpus(descriptions, transcripts)
    return adapters
