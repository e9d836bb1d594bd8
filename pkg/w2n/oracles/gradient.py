"""Central finite differences against the analytic detector gradient."""
from __future__ import annotations

from collections.abc import Iterator
from typing import Any

import numpy as np

from w2n.detector import DetectorParams, ImageBatch, build_targets, fsod_loss_and_grad
from w2n.geometry import Box
from w2n.labelgen import Instance
from w2n.oracles.base import Oracle

TAG_PATTERNS = ([1, 1], [1, 0], [0, 1])
FEATURE_DIM = 5
NUM_CLASSES = 2


def central_difference(fn, x: np.ndarray, delta: float = 1e-5) -> np.ndarray:
    """``(f(x + delta) - f(x - delta)) / (2 delta)`` per coordinate."""
    grad = np.zeros(x.shape)
    x = np.copy(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + delta
        f_plus = fn(x)
        x.flat[i] = orig - delta
        f_minus = fn(x)
        x.flat[i] = orig
        grad.flat[i] = (f_plus - f_minus) / (2 * delta)
    return grad


def _image(rng: np.random.Generator, tags: list[list[int]], shift: float) -> tuple[ImageBatch, ImageBatch]:
    """One image with a primary and a shifted regularization target set."""
    n_targets = len(tags)
    centers = rng.uniform(20.0, 80.0, size=(n_targets, 2))
    sizes = rng.uniform(10.0, 20.0, size=(n_targets, 2))
    targets = np.hstack([centers, sizes])
    near = np.repeat(targets, 3, axis=0)
    near[:, :2] += rng.uniform(-1.0, 1.0, size=(len(near), 2))
    near[:, 2:] *= rng.uniform(0.9, 1.1, size=(len(near), 2))
    far = np.hstack([rng.uniform(0.0, 100.0, size=(4, 2)), rng.uniform(5.0, 10.0, size=(4, 2))])
    proposals = np.vstack([near, far])
    features = rng.normal(0.0, 1.0, size=(len(proposals), FEATURE_DIM))
    labels = rng.integers(0, NUM_CLASSES, size=n_targets)
    primary = [Instance(Box(*row), int(c), *tag) for row, c, tag in zip(targets, labels, tags)]
    shifted = [Instance(Box(row[0] + shift, row[1], row[2], row[3]), int(c)) for row, c in zip(targets, labels)]
    return (
        ImageBatch(features, build_targets(proposals, primary, 0.5)),
        ImageBatch(features, build_targets(proposals, shifted, 0.5)),
    )


class GradientOracle(Oracle):
    name = "gradient"
    tolerance = 1e-4
    # entries below this magnitude are compared absolutely
    rel_floor = 1e-3

    def __init__(self, num_cases: int = 12):
        self.num_cases = num_cases

    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        patterns = [[list(t)] * 2 for t in TAG_PATTERNS] + [[[1, 1], [1, 0]], [[0, 1], [1, 0]]]
        for i in range(self.num_cases):
            yield {
                "seed": int(rng.integers(0, 2**31)),
                "tags": patterns[i % len(patterns)],
                "lambda_re": 0.0 if i % 2 == 0 else 0.1,
            }

    def _inputs(self, case: dict[str, Any]) -> tuple[DetectorParams, list[ImageBatch], list[ImageBatch]]:
        rng = np.random.default_rng(case["seed"])
        images = [_image(rng, case["tags"], shift=2.0) for _ in range(2)]
        base = DetectorParams.zeros(FEATURE_DIM, NUM_CLASSES)
        params = base.with_flat(rng.normal(0.0, 0.3, size=base.flat().size))
        return params, [p for p, _ in images], [r for _, r in images]

    def reference(self, case: dict[str, Any]) -> Any:
        params, batch, reg_batch = self._inputs(case)

        def loss(flat: np.ndarray) -> float:
            return fsod_loss_and_grad(params.with_flat(flat), batch, reg_batch, case["lambda_re"])[0].total

        return central_difference(loss, params.flat())

    def implementation(self, case: dict[str, Any]) -> Any:
        params, batch, reg_batch = self._inputs(case)
        return fsod_loss_and_grad(params, batch, reg_batch, case["lambda_re"])[1].flat()
