import contextlib
import io
import time

import numpy as np
import pytest

from pointfbi import cli, data, network

SESSION_START = time.perf_counter()
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_collection_modifyitems(items):
    # acceptance runs last so the end-to-end criterion sees the whole suite's wall time
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def run_cli(*argv: str) -> tuple[int, str]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main([str(a) for a in argv])
    return code, buf.getvalue()


def parse_metrics(stdout: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in stdout.splitlines() if "=" in line)


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Default dataset written by ``pointfbi gen`` (600 train / 120 test clouds)."""
    root = tmp_path_factory.mktemp("run")
    code, _ = run_cli("gen", "--out", root / "data")
    assert code == 0
    return root


@pytest.fixture(scope="session")
def trained(workspace):
    """The default ``pointfbi train`` run; downstream studies reuse this model."""
    t0 = time.perf_counter()
    code, out = run_cli("train", "--data", workspace / "data", "--out", workspace / "plain.pcxw")
    elapsed = time.perf_counter() - t0
    assert code == 0, out
    metrics = parse_metrics(out)
    return {
        "model": network.load_model(workspace / "plain.pcxw"),
        "path": workspace / "plain.pcxw",
        "test_acc": float(metrics["test_acc"]),
        "seconds": elapsed,
    }


@pytest.fixture(scope="session")
def model(trained):
    return trained["model"]


@pytest.fixture(scope="session")
def augmented_model(workspace, trained):
    code, out = run_cli(
        "train", "--data", workspace / "data", "--out", workspace / "augmented.pcxw", "--augment-rotations"
    )
    assert code == 0, out
    return network.load_model(workspace / "augmented.pcxw")


@pytest.fixture(scope="session")
def test_set(workspace):
    return data.load_dataset(workspace / "data", "test")


@pytest.fixture(scope="session")
def random_model():
    return network.init_weights(network.ModelConfig(), seed=123)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
