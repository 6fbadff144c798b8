"""Exit criteria 1-12, each at its stated tolerance (runs the same gates as `mvquant verify`)."""
import pytest

from mvquant.gates import GATES, verify

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

RESULTS: dict = {}


@pytest.fixture(scope="module")
def gate_results(tmp_path_factory):
    for res in verify(scratch=tmp_path_factory.mktemp("acceptance")):
        RESULTS[res.id] = res
    return RESULTS


@pytest.mark.parametrize("gid", sorted(GATES), ids=[f"{g:02d}-{GATES[g][0].replace(' ', '_')}" for g in sorted(GATES)])
def test_criterion(gate_results, gid):
    res = gate_results[gid]
    assert res.passed, res.line() + (f"\n{res.error}" if res.error else "")
