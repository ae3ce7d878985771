from __future__ import annotations

import numpy as np
import pytest

from cmestorm.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """20 synthetic events with one or two small frames per instrument."""
    spec = SynthSpec(n_events=20, frames_per_instrument={"C2": 2, "EIT": 1, "MDI": 1},
                     image_shape=(32, 32), seed=5)
    return generate(spec, tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record an acceptance criterion outcome; the run summary prints one line per criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        ACCEPTANCE.append((number, title, bool(ok), detail))
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {number} ({title}) not met: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
