from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from planhpo.core import SearchSpace
from planhpo.surrogate import KernelConfig, fit_arrays

settings.register_profile(
    "invariants",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("invariants")


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run full-scale directional experiments when no stored results exist")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def random_gp(rng: np.random.Generator, n: int, dim: int, *, noise: float = 1e-4,
              variant: str = "matern52", ls: float | None = None):
    x = rng.random((n, dim))
    y = np.sin(3.0 * x).sum(axis=1) + 0.1 * rng.standard_normal(n)
    ls_vals = tuple(rng.uniform(0.2, 0.8, dim)) if ls is None else (ls,) * dim
    kernel = KernelConfig(variant, ls_vals, float(rng.uniform(0.5, 2.0)), noise)
    return fit_arrays(x, y, kernel)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def box4():
    return SearchSpace.box(4, -5.0, 5.0)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for status in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(getattr(rep, "user_properties", []) or [])
            if "criterion" not in props:
                continue
            n = props["criterion"]
            if status == "skipped":
                verdict = "SKIP"
            elif status == "passed" and rep.when == "call":
                verdict = "PASS"
            elif status == "passed":
                continue
            else:
                verdict = "FAIL"
            prev = rows.get(n)
            if prev is None or prev[0] == "PASS":
                rows[n] = (verdict, props.get("detail", ""))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        verdict, detail = rows[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}".rstrip())
