import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from freqforce.config import RunConfig

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**sections) -> RunConfig:
    """A 16x16, one-block model that trains in milliseconds per step."""
    base = {
        "data": {"size": 16, "n": 32, "eval_n": 8},
        "model": {"width": 16, "depth": 1, "heads": 2, "dino_dim": 4},
        "wavelet": {"lowfreq_size": 4},
        "train": {"steps": 20, "batch_size": 4, "eval_every": 5, "optimizer": "adam", "lr": 1e-3},
    }
    for name, kv in sections.items():
        base.setdefault(name, {}).update(kv)
    return RunConfig().replace(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary ----

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def record(label: str, ok: bool, detail: str = "") -> None:
        _CRITERIA.append((label, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
