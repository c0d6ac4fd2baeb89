"""Small convolutional backbone and the two feature-extraction pathways.

A feature map for a whole image comes from a stack of strided conv+ReLU
blocks; per-object features come either from RoI pooling on that map or
from the scale-normalized-patch pathway (crop, resize to the reference
scale, run the backbone, pool globally).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import RoiError, ShapeError
from .rng import STREAM_WEIGHTS, derive


@dataclass
class Image:
    """Input image: pixels as a 1x3xHxW tensor with values in [0, 1]."""

    pixels: Tensor
    id: int = 0

    def __post_init__(self):
        if self.pixels.data.ndim != 4 or self.pixels.shape[0] != 1 or self.pixels.shape[1] != 3:
            raise ShapeError(f"Image pixels must be 1x3xHxW, got {self.pixels.shape}")
        if self.height < 16 or self.width < 16:
            raise ShapeError(f"Image must be at least 16x16, got {self.height}x{self.width}")

    @property
    def height(self) -> int:
        return self.pixels.shape[2]

    @property
    def width(self) -> int:
        return self.pixels.shape[3]


@dataclass(frozen=True)
class RoI:
    """Axis-aligned box in input-image pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float
    image_id: int = 0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise RoiError(f"RoI must have positive extent, got ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersects_image(self, width: int, height: int) -> bool:
        return self.x1 < width and self.y1 < height and self.x2 > 0 and self.y2 > 0


# Fixed miniature architecture: (out_channels, kernel, stride, pad) per block.
# Three strided 3x3 blocks then a 1x1 feature-extraction layer, all ReLU.
BACKBONE_BLOCKS: tuple[tuple[int, int, int, int], ...] = (
    (16, 3, 2, 1),
    (32, 3, 2, 1),
    (32, 3, 2, 1),
    (32, 1, 1, 0),
)


@dataclass
class Backbone:
    """Ordered conv+ReLU blocks with bookkeeping for stride and channels."""

    params: list[tuple[Parameter, Parameter]]  # (weights, bias) per block
    strides: list[int]
    pads: list[int]
    total_stride: int
    c_feat: int
    in_channels: int = 3

    @classmethod
    def small(cls, seed: int, in_channels: int = 3) -> "Backbone":
        """Miniature backbone (stride 8, 32 feature channels).

        Init is He-scaled with gain 1.5 so features start near their
        trained magnitude; the scale-aware loss then measures a roughly
        stationary feature scale from the first step.
        """
        rng = derive(seed, STREAM_WEIGHTS, 0)
        params = []
        strides = []
        pads = []
        c_in = in_channels
        for i, (c_out, k, s, p) in enumerate(BACKBONE_BLOCKS):
            std = 1.5 * math.sqrt(2.0 / (c_in * k * k))
            w = Parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32), name=f"backbone.block{i}.w")
            b = Parameter(np.zeros(c_out, dtype=np.float32), name=f"backbone.block{i}.b")
            params.append((w, b))
            strides.append(s)
            pads.append(p)
            c_in = c_out
        total = 1
        for s in strides:
            total *= s
        return cls(params=params, strides=strides, pads=pads, total_stride=total, c_feat=c_in, in_channels=in_channels)

    def named_parameters(self) -> list[Parameter]:
        out = []
        for w, b in self.params:
            out.extend((w, b))
        return out

    def forward(self, x: Tensor) -> Tensor:
        """Run the block stack on a 1xCxHxW (or NxCxHxW) tensor.

        Padding replicates edges so constant inputs give scale-invariant
        channel vectors.
        """
        if x.shape[2] < self.total_stride or x.shape[3] < self.total_stride:
            raise ShapeError(
                f"input {x.shape[2]}x{x.shape[3]} smaller than backbone stride {self.total_stride}"
            )
        for (w, b), s, p in zip(self.params, self.strides, self.pads):
            if p:
                x = ag.replicate_pad(x, p)
            x = ag.relu(ag.conv2d(x, w.tensor, b.tensor, stride=s, pad=0))
        return x


def backbone_forward(img: Image, bb: Backbone) -> Tensor:
    return bb.forward(img.pixels)


def _roi_cell_span(lo: float, hi: float, stride: int, limit: int) -> tuple[int, int]:
    c_lo = max(0, math.floor(lo / stride))
    c_hi = min(limit, math.ceil(hi / stride))
    return c_lo, c_hi


def roi_pool(feat: Tensor, roi: RoI, out: int = 7, mode: str = "avg", stride: int = 8) -> Tensor:
    """Pool an RoI's feature-map region to a fixed out x out grid.

    Feature-cell mapping: coordinates divided by stride, then floor(x1) /
    ceil(x2), clamped to the map.  Each output bin covers the cells whose
    index range [floor(b*span/out), ceil((b+1)*span/out)) intersects the
    bin's fractional span; bins are never empty.  Average mode distributes
    gradient uniformly over a bin's cells, max mode routes it to the
    first-in-row-major-order maximum of each channel.
    """
    if mode not in ("avg", "max"):
        raise ShapeError(f"roi_pool mode must be 'avg' or 'max', got {mode!r}")
    if feat.data.ndim != 4 or feat.shape[0] != 1:
        raise ShapeError(f"roi_pool expects a 1xCxhxw feature map, got {feat.shape}")
    _, c, fh, fw = feat.shape
    x_lo, x_hi = _roi_cell_span(roi.x1, roi.x2, stride, fw)
    y_lo, y_hi = _roi_cell_span(roi.y1, roi.y2, stride, fh)
    if x_hi <= x_lo or y_hi <= y_lo:
        raise RoiError(
            f"RoI ({roi.x1},{roi.y1},{roi.x2},{roi.y2}) degenerate on {fh}x{fw} map at stride {stride}"
        )
    w_span = x_hi - x_lo
    h_span = y_hi - y_lo

    cells = feat.data[0, :, y_lo:y_hi, x_lo:x_hi]
    if mode == "avg":
        # Bins factor into independent row and column spans, so the whole
        # grid is two 0/1 matmuls; exact on integer-valued data.
        rows = _bin_matrix(h_span, out, feat.data.dtype)
        cols = _bin_matrix(w_span, out, feat.data.dtype)
        counts = rows.sum(axis=1)[:, None] * cols.sum(axis=1)[None, :]
        sums = np.matmul(np.matmul(rows, cells), cols.T)
        out_data = (sums / counts)[None]

        def make_backward(out_t: Tensor):
            def _backward():
                g = np.zeros_like(feat.data)
                gbin = out_t.grad[0] / counts
                g[0, :, y_lo:y_hi, x_lo:x_hi] += np.matmul(rows.T, np.matmul(gbin, cols))
                feat._accumulate(g)

            return _backward

        return ag._result(out_data, (feat,), make_backward)

    # max mode: per-bin arg tracking for winner-only gradients
    out_data = np.empty((1, c, out, out), dtype=feat.dtype)
    spans: list[tuple[int, int, int, int]] = []
    winners: list[np.ndarray] = []
    ch_idx = np.arange(c)
    for by in range(out):
        ys = math.floor(by * h_span / out)
        ye = math.ceil((by + 1) * h_span / out)
        for bx in range(out):
            xs = math.floor(bx * w_span / out)
            xe = math.ceil((bx + 1) * w_span / out)
            bin_cells = cells[:, ys:ye, xs:xe].reshape(c, -1)
            idx = bin_cells.argmax(axis=1)
            winners.append(idx)
            out_data[0, :, by, bx] = bin_cells[ch_idx, idx]
            spans.append((ys, ye, xs, xe))

    def make_backward(out_t: Tensor):
        def _backward():
            g = np.zeros_like(feat.data)
            gout = out_t.grad[0]
            for i, (ys, ye, xs, xe) in enumerate(spans):
                by, bx = divmod(i, out)
                r, col = np.divmod(winners[i], xe - xs)
                g[0, ch_idx, y_lo + ys + r, x_lo + xs + col] += gout[:, by, bx]
            feat._accumulate(g)

        return _backward

    return ag._result(out_data, (feat,), make_backward)


def _bin_matrix(span: int, out: int, dtype) -> np.ndarray:
    """0/1 matrix mapping span cells to out bins by fractional coverage."""
    m = np.zeros((out, span), dtype=dtype)
    for b in range(out):
        lo = math.floor(b * span / out)
        hi = math.ceil((b + 1) * span / out)
        m[b, lo:hi] = 1
    return m


def crop_pixels(img: Image, roi: RoI) -> np.ndarray:
    """Integer-pixel crop of the RoI, clamped to the image (no padding)."""
    x_lo = max(0, math.floor(roi.x1))
    x_hi = min(img.width, math.ceil(roi.x2))
    y_lo = max(0, math.floor(roi.y1))
    y_hi = min(img.height, math.ceil(roi.y2))
    if x_hi <= x_lo or y_hi <= y_lo:
        raise RoiError(f"RoI ({roi.x1},{roi.y1},{roi.x2},{roi.y2}) lies outside the {img.width}x{img.height} image")
    return img.pixels.data[:, :, y_lo:y_hi, x_lo:x_hi]


def extract_reference_feature(img: Image, roi: RoI, ref_scale: int, bb: Backbone) -> Tensor:
    """Channel feature of the RoI's scale-normalized patch (constant target).

    Crop, resize to ref_scale x ref_scale, run the backbone, pool globally.
    The result carries no gradient.
    """
    patch = Tensor(crop_pixels(img, roi))
    with ag.no_grad():
        patch = ag.bilinear_resize(patch, ref_scale, ref_scale)
        feat = bb.forward(patch)
        return ag.global_avg_pool(feat)


def cam_scale_sweep(
    img: Image,
    bb: Backbone,
    scales: list[int],
    normalize_to: int | None = None,
) -> tuple[list[tuple[int, np.ndarray]], list[int]]:
    """Per-scale channel vectors: resize the image to s x s, forward, pool.

    With ``normalize_to`` set, each rescaled image is scale-normalized back
    to that reference side before feature extraction (the with-normalization
    arm of the channel-activation comparison).  Returns (vectors, skipped)
    where skipped lists scales below the backbone stride.
    """
    vectors: list[tuple[int, np.ndarray]] = []
    skipped: list[int] = []
    with ag.no_grad():
        for s in scales:
            if s < bb.total_stride:
                skipped.append(s)
                continue
            x = ag.bilinear_resize(img.pixels, s, s)
            if normalize_to is not None:
                x = ag.bilinear_resize(x, normalize_to, normalize_to)
            vec = ag.global_avg_pool(bb.forward(x)).data.reshape(bb.c_feat).copy()
            vectors.append((s, vec))
    return vectors, skipped
