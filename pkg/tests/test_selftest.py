"""The oracle suites behind ``thermotrack selftest`` must all pass."""

from __future__ import annotations

import pytest

from thermotrack.selftest import SUITES, check_pipeline_gradients, reduced_config, run_suites

FAST = [name for name in SUITES if name != "gradients"]


@pytest.mark.parametrize(
    "name", [*FAST, pytest.param("gradients", marks=pytest.mark.slow)]
)
def test_suite_passes(name):
    (result,) = run_suites([name])
    assert result.name == name
    assert result.passed, result.detail
    assert result.seconds >= 0


def test_gradients_on_reduced_config():
    result = check_pipeline_gradients(cfg=reduced_config(), max_coords=3)
    assert result.passed, result.detail


def test_parallel_keeps_order():
    names = ["losses", "identities", "metrics"]
    assert [r.name for r in run_suites(names, jobs=3)] == names


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown suites"):
        run_suites(["selection", "bogus"])
