"""Detection head, box-regression parameterization, and the multi-task loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .backbone import RoI
from .errors import RoiError, ShapeError
from .rng import STREAM_WEIGHTS, derive

HEAD_INIT_STD = 0.01


@dataclass(frozen=True)
class RegressionTarget:
    """Center/size box offsets: tx, ty are relative shifts, tw, th log-ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float32)


@dataclass
class DetectionHead:
    """Two 1x1 conv heads pooled globally: class scores and per-class boxes."""

    cls_w: Parameter
    cls_b: Parameter
    reg_w: Parameter
    reg_b: Parameter
    num_classes: int  # foreground classes; class 0 is background

    @classmethod
    def create(cls, c_feat: int, num_classes: int, seed: int) -> "DetectionHead":
        if num_classes < 1:
            raise ShapeError(f"need at least one foreground class, got {num_classes}")
        rng = derive(seed, STREAM_WEIGHTS, 2)
        k1 = num_classes + 1
        cls_w = Parameter(rng.normal(0.0, HEAD_INIT_STD, size=(k1, c_feat, 1, 1)).astype(np.float32), name="head.cls.w")
        cls_b = Parameter(np.zeros(k1, dtype=np.float32), name="head.cls.b")
        reg_w = Parameter(
            rng.normal(0.0, HEAD_INIT_STD, size=(4 * num_classes, c_feat, 1, 1)).astype(np.float32), name="head.reg.w"
        )
        reg_b = Parameter(np.zeros(4 * num_classes, dtype=np.float32), name="head.reg.b")
        return cls(cls_w=cls_w, cls_b=cls_b, reg_w=reg_w, reg_b=reg_b, num_classes=num_classes)

    def named_parameters(self) -> list[Parameter]:
        return [self.cls_w, self.cls_b, self.reg_w, self.reg_b]

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Score a batch of pooled RoI features: (N,K+1) logits, (N,4K) deltas."""
        n = feats.shape[0]
        logits = ag.reshape(ag.global_avg_pool(ag.conv2d(feats, self.cls_w.tensor, self.cls_b.tensor)), (n, self.num_classes + 1))
        deltas = ag.reshape(ag.global_avg_pool(ag.conv2d(feats, self.reg_w.tensor, self.reg_b.tensor)), (n, 4 * self.num_classes))
        return logits, deltas


def encode_regression(roi: RoI, gt: RoI) -> RegressionTarget:
    """Offsets that map the RoI onto the ground-truth box."""
    rw, rh = roi.width, roi.height
    if rw <= 0 or rh <= 0:
        raise RoiError(f"cannot encode against zero-size RoI ({roi.x1},{roi.y1},{roi.x2},{roi.y2})")
    rx, ry = roi.x1 + rw / 2, roi.y1 + rh / 2
    gw, gh = gt.width, gt.height
    gx, gy = gt.x1 + gw / 2, gt.y1 + gh / 2
    return RegressionTarget(
        tx=(gx - rx) / rw,
        ty=(gy - ry) / rh,
        tw=math.log(gw / rw),
        th=math.log(gh / rh),
    )


def decode_regression(t: RegressionTarget, roi: RoI) -> RoI:
    """Exact inverse of encode_regression."""
    rw, rh = roi.width, roi.height
    cx = roi.x1 + rw / 2 + t.tx * rw
    cy = roi.y1 + rh / 2 + t.ty * rh
    w = rw * math.exp(t.tw)
    h = rh * math.exp(t.th)
    return RoI(x1=cx - w / 2, y1=cy - h / 2, x2=cx + w / 2, y2=cy + h / 2, image_id=roi.image_id)


def box_iou(a: RoI, b: RoI) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def assign_roi_labels(rois, gts, pos_iou: float = 0.5) -> list[tuple[int, RegressionTarget | None]]:
    """Label each RoI by its max-IoU ground truth.

    Returns (class, regression target) pairs; background RoIs get class 0
    and no target.  Ties on IoU go to the lowest ground-truth index.
    """
    if not 0 < pos_iou < 1:
        raise ShapeError(f"pos_iou must lie in (0,1), got {pos_iou}")
    out: list[tuple[int, RegressionTarget | None]] = []
    for roi in rois:
        best_iou = 0.0
        best = None
        for gt in gts:
            iou = box_iou(roi, gt.box)
            if iou > best_iou:
                best_iou = iou
                best = gt
        if best is not None and best_iou >= pos_iou:
            out.append((best.class_id, encode_regression(roi, best.box)))
        else:
            out.append((0, None))
    return out


@dataclass
class LossParts:
    """Assembled training objective with per-term scalars for the log."""

    total: Tensor
    l_cls: float
    l_reg: float
    l_san: float


def regression_loss(deltas: Tensor, labels: list[int], targets: list[RegressionTarget | None], num_classes: int) -> Tensor:
    """Robust-L1 box loss, masked to foreground RoIs' own-class slice.

    Mean over all N rows of [u >= 1] * sum_coord smooth_l1(t^u - v), so
    background rows contribute exactly zero.
    """
    n = deltas.shape[0]
    target = np.zeros((n, 4 * num_classes), dtype=deltas.data.dtype)
    mask = np.zeros((n, 4 * num_classes), dtype=deltas.data.dtype)
    for row, (u, v) in enumerate(zip(labels, targets)):
        if u >= 1:
            if v is None:
                raise ShapeError(f"foreground RoI at row {row} is missing a regression target")
            lo = 4 * (u - 1)
            target[row, lo : lo + 4] = v.as_array()
            mask[row, lo : lo + 4] = 1.0
    diff = ag.sub(deltas, Tensor(target))
    masked = ag.mul(ag.smooth_l1(diff), Tensor(mask))
    return ag.scale(ag.sum_all(masked), 1.0 / n)


def multi_task_loss(
    logits: Tensor,
    deltas: Tensor,
    labels: list[int],
    targets: list[RegressionTarget | None],
    num_classes: int,
    san_terms: list[Tensor] | None = None,
    san_loss_enabled: bool = True,
    san_loss_weight: float = 1.0,
) -> LossParts:
    """Classification + gated box regression + averaged scale-aware loss.

    ``san_terms`` holds one scalar per sampled RoI branch; the scale-aware
    component is their mean, or exactly zero when disabled or empty.
    """
    l_cls = ag.softmax_cross_entropy(logits, labels)
    l_reg = regression_loss(deltas, labels, targets, num_classes)
    total = ag.add(l_cls, l_reg)
    if san_loss_enabled and san_terms:
        acc = san_terms[0]
        for t in san_terms[1:]:
            acc = ag.add(acc, t)
        l_san = ag.scale(acc, 1.0 / len(san_terms))
        total = ag.add(total, ag.scale(l_san, san_loss_weight))
        l_san_val = l_san.item()
    else:
        l_san_val = 0.0
    return LossParts(total=total, l_cls=l_cls.item(), l_reg=l_reg.item(), l_san=l_san_val)
