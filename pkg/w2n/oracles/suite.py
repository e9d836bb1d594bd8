from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from w2n.oracles.base import Oracle, OracleCase, OracleReport
from w2n.oracles.geometry import IouOracle, NmsOracle
from w2n.oracles.gradient import GradientOracle
from w2n.oracles.split import SPLIT_PS, AggregationOracle, IdealSplitOracle, TopPOracle

logger = logging.getLogger(__name__)


@dataclass
class SuiteConfig:
    seed: int = 0
    nms_cases: int = 10_000
    nms_max_boxes: int = 8
    iou_cases: int = 1_000
    top_p_cases: int = 200
    top_p_max_n: int = 12
    top_p_values: tuple[float, ...] = SPLIT_PS
    ideal_cases: int = 20
    aggregation_cases: int = 10
    gradient_cases: int = 12


def build_oracles(cfg: SuiteConfig) -> list[Oracle]:
    return [
        NmsOracle(cfg.nms_cases, cfg.nms_max_boxes),
        IouOracle(cfg.iou_cases),
        TopPOracle(cfg.top_p_cases, cfg.top_p_max_n, cfg.top_p_values),
        IdealSplitOracle(cfg.ideal_cases),
        AggregationOracle(cfg.aggregation_cases),
        GradientOracle(cfg.gradient_cases),
    ]


def check_all(cfg: SuiteConfig | None = None) -> list[OracleReport]:
    """Run every oracle over its seeded cases; the first mismatch raises
    :class:`~w2n.errors.OracleMismatchError` carrying the case dump."""
    cfg = cfg or SuiteConfig()
    rng = np.random.default_rng(cfg.seed)
    reports: list[OracleReport] = []
    for oracle in build_oracles(cfg):
        # one child stream per oracle
        found = oracle.run(rng.spawn(1)[0])
        logger.info("oracle %s: %d cases, max rel diff %.3g", oracle.name, len(found), max((r.rel_diff for r in found), default=0.0))
        reports.extend(found)
    return reports


def replay(dump: str, cfg: SuiteConfig | None = None) -> OracleReport:
    """Re-run a case from the JSON dump attached to a mismatch."""
    case = OracleCase.model_validate_json(dump)
    by_name = {o.name: o for o in build_oracles(cfg or SuiteConfig())}
    if case.oracle not in by_name:
        raise KeyError(f"unknown oracle {case.oracle!r}")
    return by_name[case.oracle].check(case.case_id, case.params)
