import pytest

import property_suites as ps

SUITES = {
    "bracket": lambda: ps.bracket_antisymmetry_jacobi(),
    "containment": lambda: ps.lie_series_properties()["contain"],
    "integrable_solvable": lambda: ps.lie_series_properties()["solvable"],
    "nilpotent_integrable": lambda: ps.lie_series_properties()["nilpotent"],
    "rescaling": lambda: ps.rescaling(),
    "path_independence": lambda: ps.chart_properties()["path"],
    "semigroup": lambda: ps.chart_properties()["semigroup"],
    "closedness": lambda: ps.stage1_closedness(),
}


@pytest.mark.parametrize("name", list(SUITES))
def test_suite(name):
    res = SUITES[name]()
    assert res.cases >= ps.CASES, res.line()
    assert not res.failures, f"{res.line()}: {res.failures[:5]}"
