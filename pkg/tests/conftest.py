import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# Acceptance criteria append (number, passed, detail) here; printed at the end of the run.
ACCEPTANCE: list[tuple[int, bool, str]] = []

SMOKE = dict(primitive_count=200, coarse_iters=1000, fine_iters=3000, scales=(1, 2), log_every=0, seed=0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def smoke_frames():
    from d2gv.synthetic import blob_gop
    return blob_gop()


@pytest.fixture(scope="session")
def smoke_run(smoke_frames):
    """The smoke GoP trained once with the combined loss at scales {1, 2}."""
    from d2gv.trainer import FitLog, TrainConfig, fit_gop
    log = FitLog()
    start = time.process_time()
    model = fit_gop(smoke_frames, TrainConfig(**SMOKE), fit_log=log)
    return model, log, time.process_time() - start
