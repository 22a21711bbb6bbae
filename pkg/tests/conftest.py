import numpy as np
import pytest

from paramsolve.wavelets import WaveletBasis

_ACCEPTANCE: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"ACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    _ACCEPTANCE.append(line)
    return line


@pytest.fixture
def acceptance(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        line = record_acceptance(number, title, ok, detail)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def basis5():
    return WaveletBasis(2, 5)
