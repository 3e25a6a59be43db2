import numpy as np
import pytest

from w2vc import frontend as fe

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small seeded synthetic corpus matching the toy model (F=8)."""
    d = tmp_path_factory.mktemp("toy_corpus")
    fe.synth_corpus(d, seed=0, n_utts=12, frames_range=(16, 30), dim=8, n_phone_classes=4)
    return fe.NormalizedCorpus(fe.load_manifest(d / "manifest.jsonl"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
