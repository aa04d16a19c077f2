from dataclasses import dataclass

import pytest

from ncttt.data import Dataset
from ncttt.model import ModelState, NCTTTModel
from ncttt.pipeline import ExperimentConfig, benchmark_config, build_datasets, load_or_train


@dataclass
class Trained:
    cfg: ExperimentConfig
    model: NCTTTModel
    state: ModelState
    source: Dataset
    source_test: Dataset
    target: Dataset


@pytest.fixture(scope="session")
def trained() -> Trained:
    """Seed-0 benchmark model, trained once per session."""
    cfg = benchmark_config(0)
    source, source_test, target = build_datasets(cfg.data, 0)
    model, state, _ = load_or_train(cfg, source, None)
    return Trained(cfg, model, state, source, source_test, target)


@pytest.fixture
def fresh(trained) -> Trained:
    trained.model.restore(trained.state)
    return trained


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for the acceptance summary and echo it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def emit(criterion: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:>2}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
