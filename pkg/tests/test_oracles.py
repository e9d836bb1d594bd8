from __future__ import annotations

import math

import numpy as np
import pytest

from w2n.errors import OracleMismatchError
from w2n.oracles.base import OracleCase
from w2n.oracles.geometry import IouOracle, NmsOracle, reference_iou, reference_nms
from w2n.oracles.gradient import central_difference
from w2n.oracles.split import exhaustive_top_p
from w2n.oracles.suite import SuiteConfig, check_all, replay

SMALL_SUITE = SuiteConfig(
    nms_cases=200,
    iou_cases=100,
    top_p_cases=20,
    top_p_max_n=8,
    ideal_cases=3,
    aggregation_cases=2,
    gradient_cases=3,
)


class _BrokenNms(NmsOracle):
    """Drops the last kept box."""

    def implementation(self, case):
        return super().implementation(case)[:-1]


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------

class TestReferences:
    def test_iou(self):
        assert reference_iou([5, 5, 10, 10], [10, 5, 10, 10]) == pytest.approx(1 / 3)
        assert reference_iou([0, 0, 2, 2], [10, 10, 2, 2]) == 0.0

    def test_nms_keeps_best_of_overlapping_pair(self):
        boxes = [[10, 10, 10, 10], [11, 10, 10, 10], [40, 40, 5, 5]]
        assert sorted(reference_nms(boxes, [0, 0, 0], [0.5, 0.9, 0.1], 0.5)) == [1, 2]

    def test_top_p_tie_break(self):
        assert exhaustive_top_p([0.3, 0.1, 0.1], 0.5) == [1]
        assert exhaustive_top_p([0.3, 0.1, 0.1], 1.0) == [0, 1, 2]

    def test_central_difference_quadratic(self):
        x = np.array([1.0, -2.0, 0.5])
        grad = central_difference(lambda v: 0.5 * float(v @ v) + 3.0 * v[0], x)
        assert np.allclose(grad, x + np.array([3.0, 0.0, 0.0]), atol=1e-8)


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

class TestCompare:
    def test_exact_oracle(self):
        oracle = NmsOracle(num_cases=1)
        assert oracle.compare([(1, 2)], [(1, 2)]) == (0.0, 0.0)
        assert oracle.compare([(1, 2)], []) == (math.inf, math.inf)

    def test_numeric_oracle(self):
        oracle = IouOracle(num_cases=1)
        _, rel = oracle.compare([0.5, 0.25], [0.5, 0.25 + 1e-12])
        assert oracle.passed(0.0, rel)
        assert oracle.compare([0.5], [0.5, 0.5]) == (math.inf, math.inf)
        assert oracle.compare([0.5], [float("nan")]) == (math.inf, math.inf)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def test_small_suite_passes():
    reports = check_all(SMALL_SUITE)
    names = {r.oracle for r in reports}
    assert names == {"nms", "iou", "top_p", "ideal_split", "loss_aggregation", "gradient"}
    assert sum(r.oracle == "nms" for r in reports) == 200
    assert sum(r.oracle == "top_p" for r in reports) == 20 * len(SMALL_SUITE.top_p_values)


def test_suite_is_seeded():
    first = check_all(SMALL_SUITE)
    again = check_all(SMALL_SUITE)
    assert [r.reference_value for r in first] == [r.reference_value for r in again]


def test_mismatch_carries_replayable_case():
    broken = _BrokenNms(num_cases=50)
    with pytest.raises(OracleMismatchError) as info:
        broken.run(np.random.default_rng(0))
    err = info.value
    assert err.oracle == "nms"
    case = OracleCase.model_validate_json(err.case_dump)
    assert case.oracle == "nms"
    assert set(case.params) == {"boxes", "labels", "scores", "t_nms"}

    # the intact implementation passes the same case
    report = replay(err.case_dump, SMALL_SUITE)
    assert report.case_id == case.case_id
    assert report.abs_diff == 0.0


def test_replay_unknown_oracle():
    dump = OracleCase(oracle="nope", case_id="nope-0", params={}).model_dump_json()
    with pytest.raises(KeyError, match="nope"):
        replay(dump)
