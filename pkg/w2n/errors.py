from __future__ import annotations


class W2NError(Exception):
    """Base class for every error raised on purpose by w2n."""


class ConfigError(W2NError, ValueError):
    pass


class InfeasibleWorldError(W2NError, ValueError):
    pass


class DimensionMismatchError(W2NError, ValueError):
    pass


class GroundTruthUnavailableError(W2NError, LookupError):
    pass


class TrainingDivergedError(W2NError, RuntimeError):
    def __init__(self, phase: str, step: int, loss: float):
        super().__init__(f"{phase}: loss became non-finite ({loss}) at step {step}")
        self.phase = phase
        self.step = step
        self.loss = loss


class PipelineError(W2NError, RuntimeError):
    def __init__(self, iteration: int, stage: str, cause: Exception):
        super().__init__(f"iteration {iteration} ({stage}): {cause}")
        self.iteration = iteration
        self.stage = stage


class OracleMismatchError(W2NError, AssertionError):
    def __init__(self, oracle: str, case_dump: str, detail: str):
        super().__init__(f"oracle {oracle} mismatch: {detail}\ncase: {case_dump}")
        self.oracle = oracle
        self.case_dump = case_dump
