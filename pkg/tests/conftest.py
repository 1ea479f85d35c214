import json
from pathlib import Path

import pytest

from maadvisor.model import Budget, DatabaseSchema, Workload, load_schema
from maadvisor.oracle import SyntheticCostOracle
from maadvisor.sqltext import load_workload_document

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def s1_schema_path() -> Path:
    return DATA_DIR / "s1_schema.json"


@pytest.fixture(scope="session")
def s1_workload_path() -> Path:
    return DATA_DIR / "s1_workload.json"


@pytest.fixture(scope="session")
def s1_schema(s1_schema_path) -> DatabaseSchema:
    return load_schema(s1_schema_path.read_text())


@pytest.fixture(scope="session")
def s1_workload(s1_schema, s1_workload_path) -> Workload:
    return load_workload_document(s1_workload_path.read_text(), s1_schema)


@pytest.fixture()
def s1_oracle(s1_schema) -> SyntheticCostOracle:
    return SyntheticCostOracle(s1_schema)


@pytest.fixture()
def s1_budget() -> Budget:
    return Budget(total_mb=0.3)
