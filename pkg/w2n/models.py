"""Persisted records.

Datasets are JSON lines, one :class:`ImageRecord` per image. Floats are
written in their shortest round-tripping form, so write-then-read is
bit-exact.
"""
from __future__ import annotations

from pydantic import BaseModel, Field

from w2n.geometry import Box


class BoxRecord(BaseModel):
    x: float
    y: float
    w: float
    h: float

    @classmethod
    def from_box(cls, box: Box) -> BoxRecord:
        return cls(x=box.x, y=box.y, w=box.w, h=box.h)

    def to_box(self) -> Box:
        return Box(self.x, self.y, self.w, self.h)


class ObjectRecord(BaseModel):
    box: BoxRecord
    label: int


class InstanceRecord(BaseModel):
    box: BoxRecord
    label: int
    lambda_cls: int = 1
    lambda_reg: int = 1


class ImageRecord(BaseModel):
    """One image of a world or pseudo dataset.

    Field order: ``index``, ``objects`` (GT box + class), ``parts`` (one
    entry per object, ``null`` when the object has no discriminative part),
    ``image_label`` (0/1 per class), ``proposals`` (rows ``[x, y, w, h]``),
    ``features`` (one row per proposal), ``instances`` (pseudo ground
    truths; ``null`` in a plain world file).
    """

    index: int
    objects: list[ObjectRecord]
    parts: list[BoxRecord | None]
    image_label: list[int]
    proposals: list[list[float]]
    features: list[list[float]]
    instances: list[InstanceRecord] | None = None


class MatrixRecord(BaseModel):
    name: str
    rows: int
    cols: int
    values: list[float]


class ParamsRecord(BaseModel):
    feature_dim: int
    num_classes: int
    matrices: list[MatrixRecord]


class IterationReport(BaseModel):
    t: int
    stage: str
    pseudo_label_mean_iou_to_gt: float
    toy_map: float
    corloc: float
    labeled_fraction: float
    # AP per class with ground truth on the test world, keyed by class index
    class_ap: dict[int, float] = Field(default_factory=dict)
    part_class_map: float | None = None
    other_class_map: float | None = None


class RunSummary(BaseModel):
    """Structured summary written next to ``iterations.csv``."""

    ap_interpolation: str = "all-points"
    iou_threshold: float = 0.5
    T: int
    use_la: bool
    use_ssl: bool
    split_mode: str
    p: float
    reports: list[IterationReport]
