from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"
CONFIGS = REPO / "configs"

# The toy corpus is authored by hand; these counts are its ground truth and
# every dataset test checks against them.
TOY_TASK_MATRIX = {"MSA": 11, "ER": 11, "FER": 8, "ERI": 12, "ECPE": 5}
TOY_DISTINCT = 12


@pytest.fixture(scope="session")
def toy_manifest() -> Path:
    return FIXTURES / "toy_corpus" / "manifest.yaml"


@pytest.fixture(scope="session")
def golden_predictions() -> Path:
    return FIXTURES / "golden" / "predictions.jsonl"


@pytest.fixture(scope="session")
def golden_report() -> Path:
    return FIXTURES / "golden" / "expected_report.json"


@pytest.fixture(scope="session")
def toy_config() -> Path:
    return CONFIGS / "toy.yaml"


@pytest.fixture(scope="session")
def toy_t1_config() -> Path:
    return CONFIGS / "toy_t1.yaml"


@pytest.fixture(scope="session")
def toy_t3_config() -> Path:
    return CONFIGS / "toy_t3.yaml"
