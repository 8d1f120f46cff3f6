import pytest
import torch

from cfsm.data import DEGRADATION_PRESETS, build_target_set, generate_toy_dataset
from cfsm.networks import SynthesisModel


@pytest.fixture(scope="session")
def toy_source(tmp_path_factory):
    return generate_toy_dataset(6, 4, 32, seed=3, out_dir=tmp_path_factory.mktemp("source"))


@pytest.fixture(scope="session")
def toy_target(tmp_path_factory):
    pool = generate_toy_dataset(4, 4, 32, seed=11, out_dir=tmp_path_factory.mktemp("pool"), first_identity=100)
    return build_target_set(pool, DEGRADATION_PRESETS["mixed"], 1.0, seed=5,
                            out_dir=tmp_path_factory.mktemp("target"))


@pytest.fixture
def small_synth():
    torch.manual_seed(0)
    return SynthesisModel(d=16, q=4, width=4, generator=torch.Generator().manual_seed(0))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Call with (criterion, passed, detail); the line is printed now and repeated in the summary."""
    def report(criterion: int, passed: bool, detail: str):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
