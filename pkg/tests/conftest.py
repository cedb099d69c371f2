import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_lib import build_stack  # noqa: E402

from voiceshield.audio_io import Waveform  # noqa: E402


@pytest.fixture(scope="session")
def trained():
    """(corpus, stack) trained once per session on the default fixtures corpus.

    Set VOICESHIELD_TEST_CHECKPOINTS to a checkpoint directory to skip training
    while iterating locally; the acceptance run always trains from scratch.
    """
    cached = os.environ.get("VOICESHIELD_TEST_CHECKPOINTS")
    if cached:
        from voiceshield.models import SurrogateStack, make_fixtures

        return make_fixtures(), SurrogateStack.load(cached)
    return build_stack()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, n=16000, sr=16000, amp=1.0, phase=0.0):
    t = np.arange(n) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    # anything that needs the trained surrogate stack takes minutes
    for item in items:
        if "trained" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
