import numpy as np
import pytest

from apnea_ecg.pipeline import PipelineConfig, process_record
from apnea_ecg.synth import SynthSpec, generate, generate_labeled_pair, separable_specs


@pytest.fixture(scope="session")
def clean_ecg():
    return generate(SynthSpec(duration=60.0, heart_rate=60.0, seed=1))


@pytest.fixture(scope="session")
def labeled_record():
    sa, non = separable_specs(seed=7)
    return generate_labeled_pair(sa, non, 12, "a01")


@pytest.fixture(scope="session")
def separable_segments():
    """64 feature segments from one 68-minute alternating SA / non-SA record."""
    sa, non = separable_specs(seed=3)
    rec, _ = generate_labeled_pair(sa, non, 68, "a01")
    res = process_record(rec, PipelineConfig())
    assert res.error is None
    assert len(res.segments) == 64
    return res.segments


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number: int, ok: bool | None, detail: str) -> bool:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"{status} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
