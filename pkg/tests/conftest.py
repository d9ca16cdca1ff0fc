import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from design import derive_all, enumerate_briefs, enumerate_profiles, features_frame, load_design_config
from rendering import PromptBuilder, load_template_set

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def full_config():
    return load_design_config("paper-fullstack")


@pytest.fixture(scope="session")
def full_design(full_config):
    return enumerate_profiles(full_config), enumerate_briefs(full_config)


@pytest.fixture(scope="session")
def full_features(full_design):
    """全设计的配对特征表（每个配对一行）。"""
    profiles, briefs = full_design
    return features_frame(derive_all(profiles, briefs))


@pytest.fixture(scope="session")
def pilot_path():
    return FIXTURES / "pilot.json"


@pytest.fixture(scope="session")
def pilot_config(pilot_path):
    return load_design_config(pilot_path)


@pytest.fixture(scope="session")
def pilot_design(pilot_config):
    return enumerate_profiles(pilot_config), enumerate_briefs(pilot_config)


@pytest.fixture
def pilot_builder(pilot_config):
    return PromptBuilder(load_template_set(pilot_config))
