import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sltkit import harness  # noqa: E402

MASTER_SEED = 1
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def run_config(tmp_path_factory, name, **raw):
    raw.setdefault("master_seed", MASTER_SEED)
    cfg = harness.ExperimentConfig.from_dict(raw)
    out = tmp_path_factory.mktemp(name)
    summary = harness.run_experiment(cfg, out)
    return summary, harness.read_csv(out / "raw.csv")


@pytest.fixture(scope="session")
def product400(tmp_path_factory):
    """ProductMean, n = 400, 200 replicates: shared by the generalization and inverse-correlation checks."""
    return run_config(
        tmp_path_factory,
        "product400",
        model="product",
        n_values=[400],
        replicates=200,
        estimators=["T", "C", "W", "G", "nu"],
        test_n=100_000,
    )
