import os
import time
from pathlib import Path

import pytest
import torch

os.environ.setdefault("DYFN_THREADS", "1")

from dyfn.cli import main  # noqa: E402
from dyfn.tensor_core import configure_threads  # noqa: E402

configure_threads()

ACCEPTANCE_STEPS = 2000


def cli(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def standard_run(tmp_path_factory):
    """simulate -> pipeline (raw) -> train -> pipeline (stabilised) -> eval on
    the standard preset, timed end to end. Shared by the acceptance suite and
    the trained-model checks."""
    root = tmp_path_factory.mktemp("standard")
    t0 = time.perf_counter()
    codes = [
        cli("simulate", "--preset", "standard", "--out", root / "data", "--seed", 0),
        cli("pipeline", "--data", root / "data", "--out", root / "raw"),
        cli("train", "--data", root / "data", "--out", root / "train", "--steps", ACCEPTANCE_STEPS, "--clip-len", 12, "--strategy", "first_frame", "--seed", 0),
        cli("pipeline", "--data", root / "data", "--stabilizer", root / "train/checkpoint", "--out", root / "stab"),
        cli("eval", "--data", root / "raw", "--out", root / "eval_raw"),
        cli("eval", "--data", root / "stab", "--out", root / "eval_stab"),
    ]
    return {"root": Path(root), "codes": codes, "seconds": time.perf_counter() - t0}


ACCEPTANCE_LINES: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
