import numpy as np
import pytest
import torch

from facesim.net import NetConfig
from facesim.world import WorldConfig, build_dataset


TINY_NET = NetConfig(
    stem_blocks=1, post_merge_blocks=2, c=1, init_channels=4, growth=4, layers_per_block=1, in_size=32
)


@pytest.fixture(scope="session")
def tiny_world():
    return WorldConfig(n_users=60, image_size=48, seed=11)


@pytest.fixture(scope="session")
def tiny_data(tiny_world):
    return build_dataset(tiny_world)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_world):
    out = tmp_path_factory.mktemp("tiny_data")
    build_dataset(tiny_world, out_dir=out)
    return out


@pytest.fixture
def tiny_net():
    return TINY_NET


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)
