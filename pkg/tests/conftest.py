import numpy as np
import pytest

from rsgan.phantom import DomainStyle, phantom_views, render_pseudo_cxr

SMALL_VOLUME = (32, 32, 32)
SMALL_DETECTOR = (32, 32)


@pytest.fixture(scope="session")
def small_drr():
    """Six views of one 32^3 phantom."""
    return phantom_views(3, 6, SMALL_VOLUME, SMALL_DETECTOR)


@pytest.fixture(scope="session")
def small_cxr(small_drr):
    style = DomainStyle(gamma=0.8, gain=1.05, bias=-0.02, noise_sigma=0.01, blur_radius=0.8, seed=5)
    return [render_pseudo_cxr(s, style) for s in small_drr]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        store[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(store[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if store:
        terminalreporter.section("acceptance")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
