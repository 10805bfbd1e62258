import sys
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)

sys.path.insert(0, str(Path(__file__).parent / "oracles"))

from ltmlc.core import build_vocabulary  # noqa: E402
from ltmlc.model import LabelQueryModel, ModelConfig  # noqa: E402

DATA_DIR = Path(__file__).parent / "data"


def tiny_config(**kw):
    base = dict(d=8, num_decoder_layers=2, num_heads=2, height=8, width=8, encoder_widths=[4, 4, 8])
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def vocab4():
    return build_vocabulary(["c0", "c1", "c2", "c3"])


@pytest.fixture
def tiny_model(vocab4):
    return LabelQueryModel(tiny_config(), vocab4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


class Verdict:
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.details = number, title, []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None and str(exc):
            detail = f"{detail}; {str(exc).splitlines()[0]}" if detail else str(exc).splitlines()[0]
        line = f"criterion {self.number} [{status}] {self.title}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
