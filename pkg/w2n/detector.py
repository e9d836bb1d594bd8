"""Toy two-head detector over proposal features.

The objectness head plays the RPN role (object/background + class-agnostic
box regression); the detection head plays the RoI role ((C+1)-way
classification with background last + per-class box regression). Both are
linear with a bias row, trained by plain gradient descent with analytic
gradients. Losses are cross-entropy and smooth L1 (transition at 1.0) on
encoded deltas.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from w2n.errors import ConfigError, DimensionMismatchError, TrainingDivergedError
from w2n.geometry import Box, Detection, decode_deltas, encode_deltas, iou_matrix
from w2n.labelgen import Instance
from w2n.models import MatrixRecord, ParamsRecord

logger = logging.getLogger(__name__)

BACKGROUND = -1
MATRICES = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg")


@dataclass
class DetectorParams:
    rpn_cls: np.ndarray
    rpn_reg: np.ndarray
    roi_cls: np.ndarray
    roi_reg: np.ndarray

    @classmethod
    def zeros(cls, feature_dim: int, num_classes: int) -> DetectorParams:
        rows = feature_dim + 1
        return cls(
            rpn_cls=np.zeros((rows, 2)),
            rpn_reg=np.zeros((rows, 4)),
            roi_cls=np.zeros((rows, num_classes + 1)),
            roi_reg=np.zeros((rows, 4 * num_classes)),
        )

    @property
    def feature_dim(self) -> int:
        return self.rpn_cls.shape[0] - 1

    @property
    def num_classes(self) -> int:
        return self.roi_cls.shape[1] - 1

    def matrices(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in MATRICES]

    def copy(self) -> DetectorParams:
        return DetectorParams(*(m.copy() for m in self.matrices()))

    def flat(self) -> np.ndarray:
        return np.concatenate([m.ravel() for m in self.matrices()])

    def with_flat(self, vector: np.ndarray) -> DetectorParams:
        out, offset = [], 0
        for m in self.matrices():
            out.append(np.asarray(vector[offset:offset + m.size], dtype=np.float64).reshape(m.shape).copy())
            offset += m.size
        return DetectorParams(*out)

    def combine(self, other: DetectorParams, a: float, b: float) -> DetectorParams:
        """Elementwise ``a * self + b * other``."""
        return DetectorParams(*(a * m + b * o for m, o in zip(self.matrices(), other.matrices())))

    def sgd_step(self, grad: DetectorParams, lr: float) -> DetectorParams:
        return DetectorParams(*(m - lr * g for m, g in zip(self.matrices(), grad.matrices())))

    def all_finite(self) -> bool:
        return all(bool(np.isfinite(m).all()) for m in self.matrices())

    def equals(self, other: DetectorParams) -> bool:
        return all(np.array_equal(m, o) for m, o in zip(self.matrices(), other.matrices()))


# ---------------------------------------------------------------------------
# Assignment and per-proposal targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    proposal_index: int
    target: int
    is_foreground: bool


def _as_boxes(proposals) -> np.ndarray:
    return np.asarray(getattr(proposals, "boxes", proposals), dtype=np.float64).reshape(-1, 4)


def _box_rows(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)


def assign(proposals, targets: Sequence[Instance], tau_assign: float) -> list[Assignment]:
    """Max-IoU assignment; ties go to the lower target index."""
    boxes = _as_boxes(proposals)
    if not targets:
        return [Assignment(i, BACKGROUND, False) for i in range(len(boxes))]
    overlaps = iou_matrix(boxes, _box_rows([t.box for t in targets]))
    best = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(len(boxes)), best]
    return [
        Assignment(i, int(best[i]), True) if best_iou[i] >= tau_assign else Assignment(i, BACKGROUND, False)
        for i in range(len(boxes))
    ]


@dataclass
class ProposalTargets:
    """Per-proposal supervision for one image, built from an assignment."""

    fg: np.ndarray
    bg: np.ndarray
    instance: np.ndarray
    labels: np.ndarray
    deltas: np.ndarray
    cls_gate: np.ndarray
    reg_gate: np.ndarray

    @property
    def num_fg(self) -> int:
        return int(self.fg.sum())

    @property
    def num_bg(self) -> int:
        return int(self.bg.sum())


def build_targets(
    proposals,
    targets: Sequence[Instance],
    tau_assign: float,
    ignore: Sequence[Box] = (),
) -> ProposalTargets:
    """Assign proposals and encode regression targets.

    Proposals whose best match (at IoU >= tau_assign) is one of ``ignore``
    are neither foreground nor background.
    """
    boxes = _as_boxes(proposals)
    n = len(boxes)
    candidates = [t.box for t in targets] + list(ignore)
    fg = np.zeros(n, dtype=bool)
    ignored = np.zeros(n, dtype=bool)
    instance = np.full(n, BACKGROUND, dtype=np.int64)
    if candidates:
        overlaps = iou_matrix(boxes, _box_rows(candidates))
        best = np.argmax(overlaps, axis=1)
        hit = overlaps[np.arange(n), best] >= tau_assign
        fg = hit & (best < len(targets))
        ignored = hit & (best >= len(targets))
        instance[fg] = best[fg]
    labels = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4))
    cls_gate = np.zeros(n)
    reg_gate = np.zeros(n)
    if fg.any():
        idx = instance[fg]
        labels[fg] = [targets[k].label for k in idx]
        deltas[fg] = encode_deltas(_box_rows([targets[k].box for k in idx]), boxes[fg])
        cls_gate[fg] = [targets[k].lambda_cls for k in idx]
        reg_gate[fg] = [targets[k].lambda_reg for k in idx]
    return ProposalTargets(
        fg=fg,
        bg=~fg & ~ignored,
        instance=instance,
        labels=labels,
        deltas=deltas,
        cls_gate=cls_gate,
        reg_gate=reg_gate,
    )


@dataclass
class ImageBatch:
    """Features of one image's proposals with their targets."""

    features: np.ndarray
    targets: ProposalTargets


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _with_bias(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class HeadOutputs:
    rpn_log_prob: np.ndarray
    rpn_delta: np.ndarray
    roi_log_prob: np.ndarray
    roi_delta: np.ndarray

    @property
    def rpn_prob(self) -> np.ndarray:
        return np.exp(self.rpn_log_prob)

    @property
    def roi_prob(self) -> np.ndarray:
        return np.exp(self.roi_log_prob)


def forward(params: DetectorParams, features: np.ndarray) -> HeadOutputs:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise DimensionMismatchError(
            f"features have shape {features.shape}, detector expects width {params.feature_dim}"
        )
    x = _with_bias(features)
    return HeadOutputs(
        rpn_log_prob=_log_softmax(x @ params.rpn_cls),
        rpn_delta=x @ params.rpn_reg,
        roi_log_prob=_log_softmax(x @ params.roi_cls),
        roi_delta=(x @ params.roi_reg).reshape(len(x), params.num_classes, 4),
    )


def predict(params: DetectorParams, features: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class scores ``(N, C)`` and decoded per-class boxes ``(N, C, 4)``."""
    out = forward(params, features)
    anchors = np.repeat(_as_boxes(boxes)[:, None, :], params.num_classes, axis=1)
    return out.roi_prob[:, : params.num_classes], decode_deltas(out.roi_delta, anchors)


def detections(
    params: DetectorParams,
    features: np.ndarray,
    boxes: np.ndarray,
    min_score: float = 0.0,
) -> list[Detection]:
    """Every (proposal, class) prediction scoring above ``min_score``."""
    scores, decoded = predict(params, features, boxes)
    rows, cols = np.nonzero(scores > min_score)
    return [
        Detection(Box.from_array(decoded[i, c]), int(c), float(scores[i, c]))
        for i, c in zip(rows, cols)
    ]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    roi_cls: float = 0.0
    roi_reg: float = 0.0
    bg: float = 0.0
    # lambda_re-weighted regularization loss; 0 outside localization adaptation
    regularization: float = 0.0

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg + self.bg + self.regularization

    def as_dict(self) -> dict[str, float]:
        return {
            "rpn_cls": self.rpn_cls,
            "rpn_reg": self.rpn_reg,
            "roi_cls": self.roi_cls,
            "roi_reg": self.roi_reg,
            "bg": self.bg,
            "regularization": self.regularization,
            "total": self.total,
        }


def smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def proposal_losses(params: DetectorParams, features: np.ndarray, targets: ProposalTargets) -> np.ndarray:
    """Ungated per-proposal components, columns ``rpn_cls, rpn_reg, roi_cls,
    roi_reg, bg``. Foreground columns are 0 on non-foreground rows and vice versa."""
    out = forward(params, features)
    n = len(targets.fg)
    rows = np.arange(n)
    losses = np.zeros((n, 5))
    fg, bg = targets.fg, targets.bg
    c = params.num_classes
    losses[fg, 0] = -out.rpn_log_prob[fg, 1]
    losses[fg, 1] = smooth_l1(out.rpn_delta[fg] - targets.deltas[fg]).sum(axis=1)
    losses[fg, 2] = -out.roi_log_prob[rows[fg], targets.labels[fg]]
    selected = out.roi_delta[rows[fg], targets.labels[fg]]
    losses[fg, 3] = smooth_l1(selected - targets.deltas[fg]).sum(axis=1)
    losses[bg, 4] = -out.rpn_log_prob[bg, 0] - out.roi_log_prob[bg, c]
    return losses


def loss_and_grad(
    params: DetectorParams,
    batch: Sequence[ImageBatch],
    *,
    include_background: bool = True,
) -> tuple[LossBreakdown, DetectorParams]:
    """Gated detection loss and its exact gradient.

    Per image: foreground terms are averaged over the image's foreground
    proposals with each term multiplied by its instance's task tag, the
    background term is averaged over its background proposals; the batch
    loss is the mean over images.
    """
    grad = DetectorParams.zeros(params.feature_dim, params.num_classes)
    if not batch:
        return LossBreakdown(), grad

    n_img = len(batch)
    features = np.vstack([b.features for b in batch])
    out = forward(params, features)
    x = _with_bias(features)

    fg = np.concatenate([b.targets.fg for b in batch])
    bg = np.concatenate([b.targets.bg for b in batch])
    labels = np.concatenate([b.targets.labels for b in batch])
    deltas = np.concatenate([b.targets.deltas for b in batch])
    w_fg = np.concatenate([np.full(len(b.targets.fg), 1.0 / max(b.targets.num_fg, 1)) for b in batch]) / n_img
    w_bg = np.concatenate([np.full(len(b.targets.bg), 1.0 / max(b.targets.num_bg, 1)) for b in batch]) / n_img
    w_cls = np.where(fg, np.concatenate([b.targets.cls_gate for b in batch]) * w_fg, 0.0)
    w_reg = np.where(fg, np.concatenate([b.targets.reg_gate for b in batch]) * w_fg, 0.0)
    w_bg = np.where(bg, w_bg, 0.0) if include_background else np.zeros_like(w_bg)

    n = len(features)
    rows = np.arange(n)
    c = params.num_classes

    # objectness classification
    rpn_target = np.where(fg, 1, 0)
    rpn_nll = -out.rpn_log_prob[rows, rpn_target]
    g = out.rpn_prob
    g[rows, rpn_target] -= 1.0
    grad.rpn_cls = x.T @ (g * (w_cls + w_bg)[:, None])

    # objectness regression
    d = out.rpn_delta - deltas
    rpn_sl1 = smooth_l1(d).sum(axis=1)
    grad.rpn_reg = x.T @ (np.clip(d, -1.0, 1.0) * w_reg[:, None])

    # detection classification
    roi_target = np.where(fg, labels, c)
    roi_nll = -out.roi_log_prob[rows, roi_target]
    g = out.roi_prob
    g[rows, roi_target] -= 1.0
    grad.roi_cls = x.T @ (g * (w_cls + w_bg)[:, None])

    # detection regression, only the assigned class slice
    d = out.roi_delta[rows, labels] - deltas
    roi_sl1 = smooth_l1(d).sum(axis=1)
    g = np.zeros_like(out.roi_delta)
    g[rows, labels] = np.clip(d, -1.0, 1.0) * w_reg[:, None]
    grad.roi_reg = x.T @ g.reshape(n, 4 * c)

    loss = LossBreakdown(
        rpn_cls=float(np.sum(w_cls * rpn_nll)),
        rpn_reg=float(np.sum(w_reg * rpn_sl1)),
        roi_cls=float(np.sum(w_cls * roi_nll)),
        roi_reg=float(np.sum(w_reg * roi_sl1)),
        bg=float(np.sum(w_bg * (rpn_nll + roi_nll))),
    )
    return loss, grad


def fsod_loss_and_grad(
    params: DetectorParams,
    batch: Sequence[ImageBatch],
    reg_batch: Sequence[ImageBatch] | None = None,
    lambda_re: float = 0.0,
) -> tuple[LossBreakdown, DetectorParams]:
    """``L_rpn + L_roi + lambda_re * (L^re_rpn + L^re_roi)``.

    Regularization targets contribute foreground terms only; background is
    already covered by the primary targets.
    """
    loss, grad = loss_and_grad(params, batch)
    if lambda_re == 0.0 or not reg_batch:
        return loss, grad
    reg_loss, reg_grad = loss_and_grad(params, reg_batch, include_background=False)
    loss.regularization = lambda_re * reg_loss.total
    return loss, grad.combine(reg_grad, 1.0, lambda_re)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: DetectorParams
    history: list[float] = field(default_factory=list)


def gradient_step(
    params: DetectorParams,
    batch: Sequence[ImageBatch],
    lr: float,
    *,
    reg_batch: Sequence[ImageBatch] | None = None,
    lambda_re: float = 0.0,
    step: int = 0,
    phase: str = "train",
) -> tuple[DetectorParams, LossBreakdown]:
    loss, grad = fsod_loss_and_grad(params, batch, reg_batch, lambda_re)
    if not np.isfinite(loss.total):
        raise TrainingDivergedError(phase, step, loss.total)
    updated = params.sgd_step(grad, lr)
    if not updated.all_finite():
        raise TrainingDivergedError(phase, step, float("nan"))
    return updated, loss


def sample_indices(n: int, batch_size: int | None, rng: np.random.Generator | None) -> np.ndarray:
    """Sorted mini-batch indices; everything when ``batch_size`` is None or covers ``n``.

    No draw is made in the full-batch case.
    """
    if batch_size is None or batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def train(
    params: DetectorParams,
    batch: Sequence[ImageBatch],
    steps: int,
    lr: float,
    *,
    reg_batch: Sequence[ImageBatch] | None = None,
    lambda_re: float = 0.0,
    batch_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Plain gradient descent; full batch unless ``batch_size`` is given.

    ``reg_batch``, when given, is aligned with ``batch`` image by image.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if batch_size is not None and rng is None:
        raise ValueError("mini-batch training needs an rng")
    history: list[float] = []
    for step in range(steps):
        pick = sample_indices(len(batch), batch_size, rng)
        images = [batch[i] for i in pick]
        reg_images = [reg_batch[i] for i in pick] if reg_batch is not None else None
        params, loss = gradient_step(
            params, images, lr, reg_batch=reg_images, lambda_re=lambda_re, step=step
        )
        history.append(loss.total)
        logger.debug("train step %d: loss=%.6f", step, loss.total)
    return TrainResult(params=params, history=history)


def training_loss(params: DetectorParams, batch: Sequence[ImageBatch]) -> float:
    return loss_and_grad(params, batch)[0].total


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_params(params: DetectorParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = ParamsRecord(
        feature_dim=params.feature_dim,
        num_classes=params.num_classes,
        matrices=[
            MatrixRecord(name=name, rows=m.shape[0], cols=m.shape[1], values=m.ravel().tolist())
            for name, m in zip(MATRICES, params.matrices())
        ],
    )
    path.write_text(record.model_dump_json(indent=1), encoding="utf-8")
    return path


def load_params(path: str | Path) -> DetectorParams:
    try:
        record = ParamsRecord.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read parameter file {path}: {exc.strerror or exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"parameter file {path} is malformed: {exc.error_count()} validation error(s)") from exc
    by_name = {m.name: m for m in record.matrices}
    missing = [name for name in MATRICES if name not in by_name]
    if missing:
        raise DimensionMismatchError(f"parameter file {path} lacks matrices {missing}")
    matrices = []
    for name in MATRICES:
        m = by_name[name]
        if len(m.values) != m.rows * m.cols:
            raise DimensionMismatchError(f"matrix {name} holds {len(m.values)} values, header says {m.rows}x{m.cols}")
        matrices.append(np.array(m.values, dtype=np.float64).reshape(m.rows, m.cols))
    return DetectorParams(*matrices)
