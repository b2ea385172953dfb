import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from fracbin.kernels import CoeffCache, HurstParams, build_coeff_table

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("pkg", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def p75():
    return HurstParams(0.75)


@pytest.fixture(scope="session")
def table75(p75):
    """Dense table for H = 0.75 up to n = 500 (shared by most tests)."""
    return build_coeff_table(500, p75)


@pytest.fixture(scope="session")
def small75(p75):
    return build_coeff_table(40, p75)


@pytest.fixture(scope="session")
def cache75(p75):
    """On-demand coefficients reaching n = 2**31."""
    return CoeffCache(p75, 2 ** 31)


@pytest.fixture(scope="session")
def oracle10():
    from oracles import OracleCoefficients

    return OracleCoefficients(0.75, 10)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    report = getattr(module, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for k in sorted(report):
            terminalreporter.write_line(report[k])
