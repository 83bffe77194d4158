import numpy as np
import pytest

from tdsml.transport import MaterialParams, TestParams, TrapSpec


def series_flux(t, D, C0, half_thickness, n_terms=400):
    """Outflux of a slab with zero-concentration faces, per face."""
    n = np.arange(n_terms)[:, None]
    l = half_thickness
    return 2 * D * C0 / l * np.exp(-((2 * n + 1) ** 2) * np.pi**2 * D * np.asarray(t)[None, :] / (4 * l * l)).sum(0)


@pytest.fixture(scope="session")
def mat():
    return MaterialParams()


@pytest.fixture(scope="session")
def test_params():
    return TestParams()


@pytest.fixture(scope="session")
def ref_traps():
    """Three-trap reference set in the case-1 generation ranges."""
    return [TrapSpec.from_mol(-50e3, 5.0), TrapSpec.from_mol(-70e3, 1.0), TrapSpec.from_mol(-95e3, 0.5)]


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion and print it."""

    def _report(number, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
