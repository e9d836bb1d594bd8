"""Brute-force references for the detection machinery, used by the test suite."""
from w2n.oracles.base import Oracle, OracleReport
from w2n.oracles.suite import SuiteConfig, check_all, replay

__all__ = ["Oracle", "OracleReport", "SuiteConfig", "check_all", "replay"]
