import warnings

import numpy as np
import pytest

from nutrirec.graphdata import SynthSpec, generate_synthetic, split_interactions
from nutrirec.tagging import load_config
from nutrirec.verify import toy_instance


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture(scope="session")
def table(config):
    return config.thresholds


@pytest.fixture(scope="session")
def toy():
    return toy_instance(0)


@pytest.fixture(scope="session")
def small():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bundle = generate_synthetic(SynthSpec(n_users=60, n_foods=40, density=0.08, n_clusters=3), seed=5)
    return bundle, split_interactions(bundle, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""
    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
