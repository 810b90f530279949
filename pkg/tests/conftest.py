import numpy as np
import pytest

from depthram import synth
from depthram.voxel import load_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_synth_config(**kw) -> synth.SynthConfig:
    base = dict(identities=2, sequences_per_identity=2, train_per_identity=1, frames=32, seed=3)
    base.update(kw)
    return synth.SynthConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two identities, two 32-frame sequences each (one train, one test)."""
    root = tmp_path_factory.mktemp("tiny")
    synth.emit_dataset(tiny_synth_config(), root)
    train, labels = load_dataset(root, "train")
    test, _ = load_dataset(root, "test", labels=labels)
    return root, train, test, labels


# ---------------------------------------------------------------- acceptance summary

_acceptance_lines: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _acceptance_lines.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
