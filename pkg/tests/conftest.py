from __future__ import annotations

import pytest

from branchbench.backend import make_backend
from branchbench.datagen import DataGenConfig, generate_dataset, load_dataset

REFERENCE = ("fullcopy", "deltaoverlay", "pathcopy")

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(DataGenConfig(warehouses=1, seed=0))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(DataGenConfig(
        warehouses=1, seed=1,
        row_multipliers={"district": 2, "customer": 5, "orders": 4, "new_order": 2, "order_line": 3,
                         "item": 50, "stock": 50, "supplier": 5},
    ))


def loaded(name: str, ds, **options):
    be = make_backend(name, **options)
    with be.connect_branch(be.root_id) as s:
        load_dataset(ds, s)
    return be


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


@pytest.fixture(params=REFERENCE)
def ref_backend(request, tiny_dataset):
    be = loaded(request.param, tiny_dataset)
    yield be
    be.close()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
