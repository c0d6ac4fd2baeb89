"""Scale-aware feature correction: partitioning, sub-networks, fusion.

RoIs are routed by area to one of several 1x1 channel-mixing sub-networks;
each corrects features toward what the backbone would produce at the
reference scale.  The same sub-network weights serve two roles: the
detection path (corrected features are fused back into the originals) and
the scale-aware loss branch, which sees a detached copy of the features so
its error never reaches the backbone.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .backbone import RoI
from .errors import ConfigError, ShapeError
from .rng import STREAM_WEIGHTS, derive


@dataclass(frozen=True)
class ScalePartitionScheme:
    """Reference side length plus sorted area thresholds between partitions.

    A threshold belongs to the partition below it: with boundaries
    (160^2, 288^2) an area of exactly 160^2 maps to partition 0.
    """

    ref_scale: int
    boundaries: tuple[float, ...] = ()

    def __post_init__(self):
        if self.ref_scale < 1:
            raise ConfigError(f"ref_scale must be positive, got {self.ref_scale}")
        bs = tuple(float(b) for b in self.boundaries)
        if any(b <= 0 for b in bs):
            raise ConfigError(f"boundaries must be positive, got {bs}")
        if any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
            raise ConfigError(f"boundaries must be strictly increasing, got {bs}")
        object.__setattr__(self, "boundaries", bs)

    @property
    def num_partitions(self) -> int:
        return len(self.boundaries) + 1


VOC_SCHEME = ScalePartitionScheme(ref_scale=224, boundaries=(160.0**2, 288.0**2))
COCO_SCHEME = ScalePartitionScheme(ref_scale=128, boundaries=(64.0**2, 192.0**2))
TOY_SCHEME = ScalePartitionScheme(ref_scale=48, boundaries=(24.0**2, 48.0**2))

SCHEME_PRESETS = {"voc": VOC_SCHEME, "coco": COCO_SCHEME, "toy": TOY_SCHEME}


def partition_index(roi: RoI, scheme: ScalePartitionScheme) -> int:
    """Partition of an RoI by its pixel area; thresholds go to the lower side."""
    return bisect_left(scheme.boundaries, roi.area)


def partition_index_for_area(area: float, scheme: ScalePartitionScheme) -> int:
    return bisect_left(scheme.boundaries, float(area))


@dataclass
class SanSubNetwork:
    """One per-partition corrector: square 1x1 channel mix plus bias."""

    w: Parameter
    b: Parameter


@dataclass
class SanModule:
    """Per-partition sub-networks sharing one routing scheme.

    ``fusion_alpha`` is normally None (plain element-wise-sum fusion); the
    identity-zero-fusion variant adds a trainable scalar gate initialized
    to zero so the module starts as an exact no-op.
    """

    scheme: ScalePartitionScheme
    subnets: list[SanSubNetwork]
    fusion_alpha: Parameter | None = None

    @classmethod
    def create(cls, scheme: ScalePartitionScheme, c_feat: int, zero_fusion: bool = False) -> "SanModule":
        subnets = []
        for i in range(scheme.num_partitions):
            w = Parameter(np.zeros((c_feat, c_feat, 1, 1), dtype=np.float32), name=f"san.part{i}.w")
            b = Parameter(np.zeros(c_feat, dtype=np.float32), name=f"san.part{i}.b")
            subnets.append(SanSubNetwork(w=w, b=b))
        alpha = Parameter(np.zeros((), dtype=np.float32), name="san.fusion_alpha") if zero_fusion else None
        return cls(scheme=scheme, subnets=subnets, fusion_alpha=alpha)

    @property
    def c_feat(self) -> int:
        return self.subnets[0].w.data.shape[0]

    def named_parameters(self) -> list[Parameter]:
        out = []
        for sn in self.subnets:
            out.extend((sn.w, sn.b))
        if self.fusion_alpha is not None:
            out.append(self.fusion_alpha)
        return out


def init_identity(m: SanModule) -> None:
    """Identity channel mix, zero biases: the module starts transparent."""
    c = m.c_feat
    eye = np.eye(c, dtype=np.float32).reshape(c, c, 1, 1)
    for sn in m.subnets:
        sn.w.data[:] = eye
        sn.b.data[:] = 0.0


def init_gaussian(m: SanModule, std: float, seed: int) -> None:
    """Zero-mean gaussian kernels (ablation baseline), zero biases."""
    if std < 0:
        raise ConfigError(f"std must be non-negative, got {std}")
    rng = derive(seed, STREAM_WEIGHTS, 1)
    for sn in m.subnets:
        sn.w.data[:] = rng.normal(0.0, std, size=sn.w.data.shape).astype(np.float32)
        sn.b.data[:] = 0.0


def san_forward(feat: Tensor, i: int, m: SanModule) -> Tensor:
    """Apply partition i's corrector: 1x1 channel mix then ReLU."""
    if not 0 <= i < len(m.subnets):
        raise ShapeError(f"partition index {i} out of range for {len(m.subnets)} sub-networks")
    if feat.shape[1] != m.c_feat:
        raise ShapeError(f"san_forward expects {m.c_feat} channels, got {feat.shape[1]}")
    sn = m.subnets[i]
    return ag.relu(ag.conv2d(feat, sn.w.tensor, sn.b.tensor, stride=1, pad=0))


def fuse(original: Tensor, san_out: Tensor, alpha: Parameter | None = None) -> Tensor:
    """Element-wise sum of original and corrected features.

    With an alpha gate, returns original + alpha * san_out instead.
    """
    if original.shape != san_out.shape:
        raise ShapeError(f"fuse shape mismatch: {original.shape} vs {san_out.shape}")
    if alpha is None:
        return ag.add(original, san_out)
    return ag.add(original, ag.scale_by(san_out, alpha.tensor))


def san_loss_branch(feat_roi: Tensor, i: int, m: SanModule, r_tilde: Tensor) -> Tensor:
    """Scale-aware loss for one RoI: channel-wise robust difference.

    The pooled RoI feature is detached at entry and collapsed to its
    channel-activation vector; the sub-network then routes that vector
    toward the reference-scale activation.  Only the sub-network weights
    receive gradient; the reference feature must already be constant.
    """
    if r_tilde.requires_grad:
        raise ShapeError("reference feature must not carry a gradient")
    if feat_roi.shape[1] != r_tilde.shape[1]:
        raise ShapeError(f"channel mismatch: features {feat_roi.shape[1]} vs reference {r_tilde.shape[1]}")
    z = ag.global_avg_pool(ag.detach(feat_roi))
    r = san_forward(z, i, m)
    return ag.sum_all(ag.smooth_l1(ag.sub(r, r_tilde)))
