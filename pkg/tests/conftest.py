import numpy as np
import pytest
from hypothesis import strategies as st

from supermarket import build_map, build_params, build_ph


def random_model(rng: np.random.Generator, m_a: int, m_b: int, d: int, rho: float):
    """A random irreducible MAP and PH, with T rescaled so the load is exactly rho."""
    C = rng.uniform(0.0, 2.0, (m_a, m_a))
    D = rng.uniform(0.1, 2.0, (m_a, m_a))
    np.fill_diagonal(C, 0.0)
    np.fill_diagonal(C, -(C.sum(axis=1) + D.sum(axis=1)))
    T = rng.uniform(0.0, 1.0, (m_b, m_b))
    np.fill_diagonal(T, 0.0)
    exit_rates = rng.uniform(0.2, 2.0, m_b)
    np.fill_diagonal(T, -(T.sum(axis=1) + exit_rates))
    alpha = rng.dirichlet(np.ones(m_b))
    map_ = build_map(C, D)
    ph = build_ph(alpha, T)
    scale = map_.lam / (rho * ph.mu)
    return build_params(map_, build_ph(alpha, T * scale), d)


@st.composite
def models(draw, max_a=3, max_b=3, max_d=4, rho=(0.1, 0.9)):
    seed = draw(st.integers(0, 2**32 - 1))
    m_a = draw(st.integers(1, max_a))
    m_b = draw(st.integers(1, max_b))
    d = draw(st.integers(1, max_d))
    r = draw(st.floats(*rho))
    return random_model(np.random.default_rng(seed), m_a, m_b, d, r)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
