import numpy as np
import pytest

from anyxr.ingest import load_dataset
from anyxr.synth import gen_dataset


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """80 triplets at 32 px (64 train / 16 test)."""
    root = tmp_path_factory.mktemp("tiny")
    gen_dataset(80, 3, 0.4, root, size=32)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_data):
    """Every model stage trained for one epoch on the tiny dataset."""
    from anyxr.joint import MODEL_STAGES, train_stage
    from tinyrun import tiny_config

    run = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    train = tiny_data.where("train")
    for stage in MODEL_STAGES:
        train_stage(stage, cfg, train, run)
    return run, cfg
