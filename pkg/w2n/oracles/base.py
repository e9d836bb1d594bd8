from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from collections.abc import Iterator
from typing import Any

import numpy as np
from pydantic import BaseModel

from w2n.errors import OracleMismatchError


class OracleReport(BaseModel):
    oracle: str
    case_id: str
    reference_value: Any
    implementation_value: Any
    abs_diff: float
    rel_diff: float


class OracleCase(BaseModel):
    """A serialized case; ``params`` is everything needed to replay it."""

    oracle: str
    case_id: str
    params: dict[str, Any]


def _plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


class Oracle(ABC):
    """Brute-force reference checked against one implementation.

    ``tolerance`` of 0 means exact comparison of the (discrete) outputs;
    otherwise outputs are numeric arrays compared by max relative error.
    """

    name: str = ""
    tolerance: float = 0.0
    # floor for the denominator of relative errors
    rel_floor: float = 1e-5

    @abstractmethod
    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        ...

    @abstractmethod
    def reference(self, case: dict[str, Any]) -> Any:
        ...

    @abstractmethod
    def implementation(self, case: dict[str, Any]) -> Any:
        ...

    def compare(self, ref: Any, impl: Any) -> tuple[float, float]:
        if self.tolerance == 0.0:
            same = _plain(ref) == _plain(impl)
            return (0.0, 0.0) if same else (math.inf, math.inf)
        ref_arr = np.asarray(ref, dtype=np.float64)
        impl_arr = np.asarray(impl, dtype=np.float64)
        if ref_arr.shape != impl_arr.shape:
            return math.inf, math.inf
        if ref_arr.size == 0:
            return 0.0, 0.0
        with np.errstate(invalid="ignore"):
            diff = np.where(ref_arr == impl_arr, 0.0, np.abs(ref_arr - impl_arr))
        if np.isnan(diff).any():
            return math.inf, math.inf
        scale = np.maximum(np.maximum(np.abs(ref_arr), np.abs(impl_arr)), self.rel_floor)
        return float(diff.max()), float((diff / scale).max())

    def passed(self, abs_diff: float, rel_diff: float) -> bool:
        if self.tolerance == 0.0:
            return abs_diff == 0.0
        return rel_diff < self.tolerance

    def check(self, case_id: str, case: dict[str, Any]) -> OracleReport:
        """Run one case; raise with the serialized case on mismatch."""
        ref = self.reference(case)
        impl = self.implementation(case)
        abs_diff, rel_diff = self.compare(ref, impl)
        if not self.passed(abs_diff, rel_diff):
            dump = OracleCase(oracle=self.name, case_id=case_id, params=_plain(case)).model_dump_json()
            raise OracleMismatchError(
                self.name, dump, f"reference {json.dumps(_plain(ref))} != implementation {json.dumps(_plain(impl))}"
            )
        return OracleReport(
            oracle=self.name,
            case_id=case_id,
            reference_value=_plain(ref),
            implementation_value=_plain(impl),
            abs_diff=abs_diff,
            rel_diff=rel_diff,
        )

    def run(self, rng: np.random.Generator) -> list[OracleReport]:
        return [self.check(f"{self.name}-{i}", case) for i, case in enumerate(self.cases(rng))]
