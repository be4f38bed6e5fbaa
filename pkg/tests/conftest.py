import numpy as np
import pytest

from protosed.dataio import write_wav


def tone(freq, dur, sr, amp=0.5, phase=0.0):
    t = np.arange(int(round(dur * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def wav_factory(tmp_path):
    def make(samples, sr, name="x.wav", dtype=None):
        path = tmp_path / name
        if dtype is None:
            write_wav(path, samples, sr)
        else:
            from scipy.io import wavfile
            wavfile.write(path, sr, samples.astype(dtype))
        return path
    return make


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""
    def record(number, name, ok, detail=""):
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{tag}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
        print(line)
        _CRITERIA.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
