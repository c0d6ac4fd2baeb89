"""Training loop, model container, checkpointing, and inference.

A training step samples two images, builds jittered proposals with a
1:3 positive:negative cap, runs the backbone and the RoI heads, and adds
the scale-aware branch for a fixed-size random subset of the RoIs before
one SGD update.  Everything is a pure function of (dataset, config), so
checkpoints replay bit-for-bit under a fixed seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .analysis import ApResult, Detection, RmseRow, evaluate_ap, rmse_with_san, rmse_without_san
from .autograd import Parameter, Tensor
from .backbone import BACKBONE_BLOCKS, Backbone, Image, RoI, crop_pixels, extract_reference_feature, roi_pool
from .data import Annotation, make_proposals, proposal_rng
from .errors import CheckpointError, ConfigError, GraphError, SanlabError
from .losses import (
    DetectionHead,
    LossParts,
    RegressionTarget,
    assign_roi_labels,
    box_iou,
    decode_regression,
    multi_task_loss,
)
from .rng import STREAM_STEP, derive
from .san import (
    SanModule,
    ScalePartitionScheme,
    TOY_SCHEME,
    fuse,
    init_gaussian,
    init_identity,
    partition_index,
    partition_index_for_area,
    san_forward,
    san_loss_branch,
)

SAN_MODES = ("off", "no-loss", "full")
INIT_MODES = ("identity", "gaussian", "identity-zero-fusion")
POOL_MODES = ("avg", "max")

CHECKPOINT_MAGIC = b"SANLAB01"
LOG_HEADER = "iter,l_cls,l_reg,l_san,lr"


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 2000
    base_lr: float = 0.02
    lr_decay_step: int = 1500
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    images_per_step: int = 2
    rois_per_image: int = 32
    pos_fraction: float = 0.25
    pos_iou: float = 0.5
    n_pos_jitter: int = 6
    n_neg: int = 30
    num_classes: int = 3
    san_mode: str = "full"
    init_mode: str = "identity"
    gaussian_std: float = 0.05
    san_pool: str = "avg"
    san_samples: int = 16
    san_loss_weight: float = 1.0
    scheme: ScalePartitionScheme = TOY_SCHEME
    seed: int = 0
    # debug mode: re-runs every step without the scale-aware term and asserts
    # the backbone gradients are bitwise unchanged (the siamese blocking contract)
    debug_gradient_checks: bool = False

    def validate(self) -> None:
        if self.san_mode not in SAN_MODES:
            raise ConfigError(f"san_mode must be one of {SAN_MODES}, got {self.san_mode!r}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.san_pool not in POOL_MODES:
            raise ConfigError(f"san_pool must be one of {POOL_MODES}, got {self.san_pool!r}")
        for name in ("base_lr", "lr_decay_factor", "momentum", "weight_decay", "pos_fraction", "san_loss_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("iterations", "san_samples", "n_pos_jitter", "n_neg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("images_per_step", "rois_per_image", "num_classes", "lr_decay_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.pos_iou < 1:
            raise ConfigError(f"pos_iou must lie in (0,1), got {self.pos_iou}")
        if self.san_samples > self.images_per_step * self.rois_per_image:
            raise ConfigError(
                f"san_samples={self.san_samples} exceeds the mini-batch RoI budget "
                f"{self.images_per_step * self.rois_per_image}"
            )


@dataclass
class DetectionModel:
    backbone: Backbone
    head: DetectionHead
    san: SanModule | None
    scheme: ScalePartitionScheme
    num_classes: int

    def named_parameters(self) -> list[Parameter]:
        params = self.backbone.named_parameters()
        if self.san is not None:
            params += self.san.named_parameters()
        params += self.head.named_parameters()
        return params

    @property
    def san_enabled(self) -> bool:
        return self.san is not None


def build_model(cfg: TrainingConfig) -> DetectionModel:
    cfg.validate()
    bb = Backbone.small(cfg.seed)
    head = DetectionHead.create(bb.c_feat, cfg.num_classes, cfg.seed)
    san = None
    if cfg.san_mode != "off":
        san = SanModule.create(cfg.scheme, bb.c_feat, zero_fusion=cfg.init_mode == "identity-zero-fusion")
        if cfg.init_mode == "gaussian":
            init_gaussian(san, cfg.gaussian_std, cfg.seed)
        else:
            init_identity(san)
    return DetectionModel(backbone=bb, head=head, san=san, scheme=cfg.scheme, num_classes=cfg.num_classes)


# ---------------------------------------------------------------------------
# step construction


def sample_san_rois(rois: list, n: int, rng: np.random.Generator) -> list:
    """Uniform subsample without replacement, preserving original order."""
    if n >= len(rois):
        return list(rois)
    if n <= 0:
        return []
    idx = sorted(rng.choice(len(rois), size=n, replace=False).tolist())
    return [rois[i] for i in idx]


@dataclass
class StepBatch:
    """Everything one optimization step consumes, fully sampled up front."""

    images: list[Image]
    rois: list[RoI]
    image_slot: list[int]  # per RoI: index into images
    labels: list[int]
    targets: list[RegressionTarget | None]
    san_indices: list[int]  # indices into rois for the scale-aware branch


def build_step_batch(
    dataset: list[tuple[Image, list[Annotation]]],
    cfg: TrainingConfig,
    step: int,
) -> StepBatch:
    rng = derive(cfg.seed, STREAM_STEP, step)
    n_img = min(cfg.images_per_step, len(dataset))
    picks = rng.choice(len(dataset), size=n_img, replace=False)
    images: list[Image] = []
    rois: list[RoI] = []
    slots: list[int] = []
    labels: list[int] = []
    targets: list[RegressionTarget | None] = []
    for slot, di in enumerate(picks.tolist()):
        img, anns = dataset[di]
        images.append(img)
        props = make_proposals(anns, cfg.n_pos_jitter, cfg.n_neg, rng, img.width)
        assigned = assign_roi_labels(props, anns, cfg.pos_iou)
        pos = [i for i, (u, _) in enumerate(assigned) if u >= 1]
        neg = [i for i, (u, _) in enumerate(assigned) if u == 0]
        n_pos = min(len(pos), int(round(cfg.rois_per_image * cfg.pos_fraction)))
        n_neg = min(len(neg), cfg.rois_per_image - n_pos)
        keep = []
        if pos:
            keep += sorted(rng.choice(len(pos), size=n_pos, replace=False).tolist()) if n_pos < len(pos) else list(range(len(pos)))
            keep = [pos[i] for i in keep]
        if neg:
            kn = sorted(rng.choice(len(neg), size=n_neg, replace=False).tolist()) if n_neg < len(neg) else list(range(len(neg)))
            keep += [neg[i] for i in kn]
        for i in keep:
            rois.append(props[i])
            slots.append(slot)
            labels.append(assigned[i][0])
            targets.append(assigned[i][1])
    san_indices = sample_san_rois(list(range(len(rois))), cfg.san_samples, rng)
    return StepBatch(images=images, rois=rois, image_slot=slots, labels=labels, targets=targets, san_indices=san_indices)


# ---------------------------------------------------------------------------
# forward graph


def forward_roi_features(model: DetectionModel, feats: list[Tensor], batch_rois: list[RoI], slots: list[int]) -> Tensor:
    """Pool every RoI and run the split / correct-per-partition / merge path."""
    stride = model.backbone.total_stride
    pooled = [roi_pool(feats[s], r, out=7, mode="avg", stride=stride) for r, s in zip(batch_rois, slots)]
    batch = ag.concat0(pooled)
    if model.san is None:
        return batch
    parts = [partition_index(r, model.scheme) for r in batch_rois]
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(parts):
        groups.setdefault(p, []).append(i)
    corrected: list[Tensor] = []
    order: list[int] = []
    for p in sorted(groups):
        idx = groups[p]
        part_in = ag.take0(batch, idx) if len(idx) != len(batch_rois) else batch
        corrected.append(san_forward(part_in, p, model.san))
        order += idx
    merged = corrected[0] if len(corrected) == 1 else ag.concat0(corrected)
    if order != list(range(len(batch_rois))):
        inverse = np.argsort(np.asarray(order, dtype=np.intp))
        merged = ag.take0(merged, inverse)
    return fuse(batch, merged, alpha=model.san.fusion_alpha)


def cell_aligned_roi(roi: RoI, stride: int, width: int, height: int) -> RoI:
    """The RoI expanded to the feature-cell footprint its pooling reads.

    Reference patches are cropped on this footprint so both siamese
    pathways see the same image region; at stride 8 on small images the
    cell snap would otherwise dominate the scale effect being learned.
    """
    x1 = max(0.0, math.floor(roi.x1 / stride) * stride)
    y1 = max(0.0, math.floor(roi.y1 / stride) * stride)
    x2 = min(float(width), math.ceil(roi.x2 / stride) * stride)
    y2 = min(float(height), math.ceil(roi.y2 / stride) * stride)
    return RoI(x1=x1, y1=y1, x2=x2, y2=y2, image_id=roi.image_id)


def reference_feature_for_roi(img: Image, roi: RoI, ref_scale: int, bb: Backbone) -> Tensor:
    """Scale-normalized target feature for one RoI (cell-aligned crop)."""
    snapped = cell_aligned_roi(roi, bb.total_stride, img.width, img.height)
    return extract_reference_feature(img, snapped, ref_scale, bb)


def batched_reference_features(pairs: list[tuple[Image, RoI]], ref_scale: int, bb: Backbone) -> list[Tensor]:
    """Reference-scale features for many RoIs in one backbone pass.

    Crops are cell-aligned like reference_feature_for_roi; per-sample
    results are bit-identical to it (the batch axis never mixes into any
    reduction).
    """
    if not pairs:
        return []
    with ag.no_grad():
        patches = []
        for img, roi in pairs:
            snapped = cell_aligned_roi(roi, bb.total_stride, img.width, img.height)
            patches.append(ag.bilinear_resize(Tensor(crop_pixels(img, snapped)), ref_scale, ref_scale).data)
        stacked = Tensor(np.concatenate(patches, axis=0))
        pooled = ag.global_avg_pool(bb.forward(stacked))
    return [Tensor(pooled.data[i : i + 1]) for i in range(len(pairs))]


def compute_step_losses(
    model: DetectionModel,
    batch: StepBatch,
    cfg: TrainingConfig,
    include_san_loss: bool,
) -> LossParts:
    """Assemble the full objective graph for one sampled step."""
    feats = [model.backbone.forward(img.pixels) for img in batch.images]
    roi_feats = forward_roi_features(model, feats, batch.rois, batch.image_slot)
    logits, deltas = model.head.forward(roi_feats)
    san_terms: list[Tensor] = []
    if include_san_loss and model.san is not None:
        stride = model.backbone.total_stride
        r_tildes = batched_reference_features(
            [(batch.images[batch.image_slot[j]], batch.rois[j]) for j in batch.san_indices],
            model.scheme.ref_scale,
            model.backbone,
        )
        for j, r_tilde in zip(batch.san_indices, r_tildes):
            roi = batch.rois[j]
            feat_roi = roi_pool(feats[batch.image_slot[j]], roi, out=7, mode=cfg.san_pool, stride=stride)
            san_terms.append(san_loss_branch(feat_roi, partition_index(roi, model.scheme), model.san, r_tilde))
    return multi_task_loss(
        logits,
        deltas,
        batch.labels,
        batch.targets,
        model.num_classes,
        san_terms=san_terms,
        san_loss_enabled=include_san_loss,
        san_loss_weight=cfg.san_loss_weight,
    )


def fill_missing_grads(params: list[Parameter]) -> None:
    """Zero-fill gradients of parameters the step's loss did not touch
    (e.g. partitions with no RoIs this mini-batch)."""
    for p in params:
        if p.tensor.grad is None:
            p.tensor.grad = np.zeros_like(p.tensor.data)


class TrainingDiverged(SanlabError):
    def __init__(self, step: int, parts: LossParts, lr: float):
        self.step = step
        self.diagnostics = {"iter": step, "l_cls": parts.l_cls, "l_reg": parts.l_reg, "l_san": parts.l_san, "lr": lr}
        super().__init__(f"non-finite loss at iteration {step}: {self.diagnostics}")


@dataclass
class TrainResult:
    model: DetectionModel
    log_rows: list[tuple[int, float, float, float, float]]
    config: TrainingConfig


def learning_rate(cfg: TrainingConfig, step: int) -> float:
    return cfg.base_lr * (cfg.lr_decay_factor if step >= cfg.lr_decay_step else 1.0)


def train(dataset: list[tuple[Image, list[Annotation]]], cfg: TrainingConfig) -> TrainResult:
    """Run the configured number of SGD steps and return model plus log.

    Correction sub-network weights are exempt from weight decay: decay
    pulls them toward zero, i.e. away from the near-identity mapping they
    are initialized to and must stay close to.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    model = build_model(cfg)
    san_params = model.san.named_parameters() if model.san is not None else []
    decayed = model.backbone.named_parameters() + model.head.named_parameters()
    all_params = model.named_parameters()
    rows: list[tuple[int, float, float, float, float]] = []
    include_san = cfg.san_mode == "full"
    backbone_params = model.backbone.named_parameters()
    for step in range(cfg.iterations):
        batch = build_step_batch(dataset, cfg, step)
        blocked_reference = None
        if cfg.debug_gradient_checks and include_san:
            compute_step_losses(model, batch, cfg, include_san_loss=False).total.backward()
            blocked_reference = [p.tensor.grad.copy() if p.tensor.grad is not None else None for p in backbone_params]
            for p in all_params:
                p.tensor.grad = None
        parts = compute_step_losses(model, batch, cfg, include_san_loss=include_san)
        lr = learning_rate(cfg, step)
        if not all(math.isfinite(v) for v in (parts.l_cls, parts.l_reg, parts.l_san)):
            raise TrainingDiverged(step, parts, lr)
        parts.total.backward()
        if blocked_reference is not None:
            for p, ref in zip(backbone_params, blocked_reference):
                got = p.tensor.grad
                same = (got is None and ref is None) or (got is not None and ref is not None and np.array_equal(got, ref))
                if not same:
                    raise GraphError(
                        f"step {step}: scale-aware loss leaked gradient into backbone parameter {p.name}"
                    )
        fill_missing_grads(all_params)
        ag.sgd_step(decayed, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        if san_params:
            ag.sgd_step(san_params, lr=lr, momentum=cfg.momentum, weight_decay=0.0)
        rows.append((step, parts.l_cls, parts.l_reg, parts.l_san, lr))
    return TrainResult(model=model, log_rows=rows, config=cfg)


def write_log_csv(path: Path, rows: list[tuple[int, float, float, float, float]]) -> None:
    lines = [LOG_HEADER]
    for it, l_cls, l_reg, l_san, lr in rows:
        lines.append(f"{it},{l_cls:.8g},{l_reg:.8g},{l_san:.8g},{lr:.8g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint format: magic, then per parameter (u32 name length, name bytes,
# u32 rank, u32 dims..., float32 little-endian payload).  Scheme and class
# count ride along as reserved "meta.*" entries.


def _checkpoint_entries(model: DetectionModel) -> list[tuple[str, np.ndarray]]:
    entries = [
        ("meta.num_classes", np.array([model.num_classes], dtype=np.float32)),
        ("meta.ref_scale", np.array([model.scheme.ref_scale], dtype=np.float32)),
        ("meta.boundaries", np.asarray(model.scheme.boundaries, dtype=np.float32)),
    ]
    entries += [(p.name, p.tensor.data) for p in model.named_parameters()]
    return entries


def save_checkpoint(path: Path, model: DetectionModel) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in _checkpoint_entries(model):
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_checkpoint_entries(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}; expected {CHECKPOINT_MAGIC!r}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name").decode()
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims")) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            if rank == 1 and dims[0] == 0:
                count = 0
            payload = _read_exact(f, 4 * count, f"payload of {name}")
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return entries


def load_checkpoint(path: Path) -> DetectionModel:
    entries = read_checkpoint_entries(path)
    for key in ("meta.num_classes", "meta.ref_scale", "meta.boundaries"):
        if key not in entries:
            raise CheckpointError(f"checkpoint missing required entry {key}")
    num_classes = int(entries["meta.num_classes"][0])
    scheme = ScalePartitionScheme(
        ref_scale=int(entries["meta.ref_scale"][0]),
        boundaries=tuple(float(b) for b in entries["meta.boundaries"]),
    )

    params: list[tuple[Parameter, Parameter]] = []
    strides, pads = [], []
    i = 0
    while f"backbone.block{i}.w" in entries:
        w = entries[f"backbone.block{i}.w"]
        b = entries[f"backbone.block{i}.b"]
        _, _, k, _ = w.shape
        spec_k = BACKBONE_BLOCKS[i][1] if i < len(BACKBONE_BLOCKS) else None
        if spec_k != k:
            raise CheckpointError(f"backbone block {i} kernel {k} does not match the fixed architecture")
        params.append((Parameter(w.copy(), name=f"backbone.block{i}.w"), Parameter(b.copy(), name=f"backbone.block{i}.b")))
        strides.append(BACKBONE_BLOCKS[i][2])
        pads.append(BACKBONE_BLOCKS[i][3])
        i += 1
    if not params:
        raise CheckpointError("checkpoint has no backbone parameters")
    total = 1
    for s in strides:
        total *= s
    c_feat = params[-1][0].data.shape[0]
    bb = Backbone(
        params=params,
        strides=strides,
        pads=pads,
        total_stride=total,
        c_feat=c_feat,
        in_channels=params[0][0].data.shape[1],
    )

    san = None
    if "san.part0.w" in entries:
        n_parts = 0
        while f"san.part{n_parts}.w" in entries:
            n_parts += 1
        if n_parts != scheme.num_partitions:
            raise CheckpointError(f"checkpoint has {n_parts} sub-networks but the scheme implies {scheme.num_partitions}")
        san = SanModule.create(scheme, c_feat, zero_fusion="san.fusion_alpha" in entries)
        for p_i, sn in enumerate(san.subnets):
            sn.w.data[:] = entries[f"san.part{p_i}.w"]
            sn.b.data[:] = entries[f"san.part{p_i}.b"]
        if san.fusion_alpha is not None:
            san.fusion_alpha.data[...] = entries["san.fusion_alpha"]

    for key in ("head.cls.w", "head.cls.b", "head.reg.w", "head.reg.b"):
        if key not in entries:
            raise CheckpointError(f"checkpoint missing required entry {key}")
    head = DetectionHead(
        cls_w=Parameter(entries["head.cls.w"].copy(), name="head.cls.w"),
        cls_b=Parameter(entries["head.cls.b"].copy(), name="head.cls.b"),
        reg_w=Parameter(entries["head.reg.w"].copy(), name="head.reg.w"),
        reg_b=Parameter(entries["head.reg.b"].copy(), name="head.reg.b"),
        num_classes=num_classes,
    )
    return DetectionModel(backbone=bb, head=head, san=san, scheme=scheme, num_classes=num_classes)


# ---------------------------------------------------------------------------
# inference


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_rois(model: DetectionModel, img: Image, rois: list[RoI]) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (N, K+1) and box deltas (N, 4K) for proposals."""
    with ag.no_grad():
        feat = model.backbone.forward(img.pixels)
        roi_feats = forward_roi_features(model, [feat], rois, [0] * len(rois))
        logits, deltas = model.head.forward(roi_feats)
    return _softmax(logits.data), deltas.data.copy()


def nms(boxes: list[RoI], scores: list[float], iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices (score desc)."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) <= iou_thresh for k in keep):
            keep.append(i)
    return keep


def detect(
    model: DetectionModel,
    img: Image,
    proposals: list[RoI],
    score_thresh: float = 0.05,
    nms_iou: float = 0.3,
) -> list[Detection]:
    """Score proposals and return per-class NMS'd detections."""
    if not proposals:
        return []
    probs, deltas = predict_rois(model, img, proposals)
    out: list[Detection] = []
    for k in range(1, model.num_classes + 1):
        cand_boxes: list[RoI] = []
        cand_scores: list[float] = []
        for j, roi in enumerate(proposals):
            score = float(probs[j, k])
            if score < score_thresh:
                continue
            t = RegressionTarget(*deltas[j, 4 * (k - 1) : 4 * k].tolist())
            box = decode_regression(t, roi)
            x1 = min(max(box.x1, 0.0), img.width - 1.0)
            y1 = min(max(box.y1, 0.0), img.height - 1.0)
            x2 = max(min(box.x2, float(img.width)), x1 + 1.0)
            y2 = max(min(box.y2, float(img.height)), y1 + 1.0)
            cand_boxes.append(RoI(x1=x1, y1=y1, x2=x2, y2=y2, image_id=img.id))
            cand_scores.append(score)
        for i in nms(cand_boxes, cand_scores, nms_iou):
            out.append(Detection(image_id=img.id, class_id=k, score=cand_scores[i], box=cand_boxes[i]))
    out.sort(key=lambda d: -d.score)
    return out


def evaluate_detector(
    model: DetectionModel,
    dataset: list[tuple[Image, list[Annotation]]],
    seed: int,
    n_pos_jitter: int = 8,
    n_neg: int = 16,
    iou_thresh: float = 0.5,
    score_thresh: float = 0.05,
    nms_iou: float = 0.3,
) -> tuple[ApResult, list[Detection]]:
    """Jittered-proposal evaluation over a dataset; returns (ApResult, detections)."""
    detections: list[Detection] = []
    gts: list[Annotation] = []
    for img, anns in dataset:
        gts.extend(anns)
        props = make_proposals(anns, n_pos_jitter, n_neg, proposal_rng(seed, img.id), img.width)
        detections.extend(detect(model, img, props, score_thresh=score_thresh, nms_iou=nms_iou))
    return evaluate_ap(detections, gts, iou_thresh=iou_thresh), detections


def default_rmse_scales(ref_scale: int, min_scale: int) -> list[int]:
    """Geometric ladder around the reference scale, excluding it."""
    ladder = [ref_scale // 4, ref_scale // 3, ref_scale // 2, (2 * ref_scale) // 3, (4 * ref_scale) // 3, 2 * ref_scale]
    out: list[int] = []
    for s in ladder:
        if s >= min_scale and s != ref_scale and s not in out:
            out.append(s)
    return out


def rendered_roi_feature(img: Image, box: RoI, scale: int, bb: Backbone) -> Tensor:
    """Pooled channel feature of the object rendered at the given side length.

    A context window around the box is resized so the box side maps to
    ``scale``, the backbone runs on that rendering, and the mapped box is
    RoI-pooled and globally averaged -- the same extraction the detector
    applies to proposals.  The margin is sized in rendered units (four
    stride cells) so the box cells' receptive fields see real image
    context at every scale.
    """
    side = math.sqrt(box.area)
    factor = scale / side
    margin = 4 * bb.total_stride / factor
    wx1 = max(0, math.floor(box.x1 - margin))
    wy1 = max(0, math.floor(box.y1 - margin))
    wx2 = min(img.width, math.ceil(box.x2 + margin))
    wy2 = min(img.height, math.ceil(box.y2 + margin))
    out_h = max(bb.total_stride, int(round((wy2 - wy1) * factor)))
    out_w = max(bb.total_stride, int(round((wx2 - wx1) * factor)))
    fy = out_h / (wy2 - wy1)
    fx = out_w / (wx2 - wx1)
    with ag.no_grad():
        window = Tensor(img.pixels.data[:, :, wy1:wy2, wx1:wx2])
        feat = bb.forward(ag.bilinear_resize(window, out_h, out_w))
        mapped = RoI(
            x1=(box.x1 - wx1) * fx,
            y1=(box.y1 - wy1) * fy,
            x2=(box.x2 - wx1) * fx,
            y2=(box.y2 - wy1) * fy,
            image_id=box.image_id,
        )
        return ag.global_avg_pool(roi_pool(feat, mapped, out=7, mode="avg", stride=bb.total_stride))


def rmse_report(
    model: DetectionModel,
    dataset: list[tuple[Image, list[Annotation]]],
    scales: list[int] | None = None,
) -> list[RmseRow]:
    """Scale-space feature distances for every annotation.

    Per object and rendered scale s: the pooled feature of the object at
    side s is compared against the reference-scale patch feature (the
    scale-invariant target), before and after the partition's correction.
    """
    if model.san is None:
        raise SanlabError("rmse report needs a model with the correction module")
    bb = model.backbone
    ref = model.scheme.ref_scale
    if scales is None:
        scales = default_rmse_scales(ref, bb.total_stride)
    rows: list[RmseRow] = []
    sample_id = 0
    for img, anns in dataset:
        for ann in anns:
            z0 = reference_feature_for_roi(img, ann.box, ref, bb)
            for s in scales:
                if s < bb.total_stride:
                    continue
                z_s = rendered_roi_feature(img, ann.box, s, bb)
                part = partition_index_for_area(float(s * s), model.scheme)
                rows.append(
                    RmseRow(
                        sample_id=sample_id,
                        class_id=ann.class_id,
                        scale=s,
                        rmse_without=rmse_without_san(z_s, z0),
                        rmse_with=rmse_with_san(z_s, z0, model.san, part),
                    )
                )
            sample_id += 1
    return rows
