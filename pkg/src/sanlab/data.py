"""Deterministic synthetic multi-scale detection data.

Images are low-amplitude noise backgrounds with 1-3 non-overlapping
textured shapes whose side lengths are drawn log-uniformly, so objects of
every scale partition occur in quantity.  Each class has a distinct shape
and fill texture (solid square, striped disk, checkered triangle), keeping
classification easy for a tiny backbone.

On-disk layout: binary PPM (P6) images plus a plain-text manifest, one
record per image (the file name line, then one `class x1 y1 x2 y2` line
per object; `#` starts a comment, used to note skipped placements).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .backbone import Image, RoI
from .errors import ConfigError, SanlabError
from .losses import box_iou
from .rng import STREAM_DATA, STREAM_EVAL, derive

PLACEMENT_RETRIES = 100
MIN_GAP = 2.0  # pixels kept clear between placed boxes


@dataclass(frozen=True)
class Annotation:
    box: RoI
    class_id: int


@dataclass(frozen=True)
class DatasetConfig:
    """Knobs for the generator.

    Object side lengths are drawn log-uniformly within a uniformly chosen
    size band (band edges default to the toy partition thresholds), so
    every scale partition receives a sizeable share of objects even after
    placement failures skew against large instances.
    """

    num_images: int
    image_size: int = 96
    num_classes: int = 3
    scale_range: tuple[float, float] = (8.0, 80.0)
    size_bands: tuple[float, ...] = (24.0, 48.0)
    objects_min: int = 1
    objects_max: int = 3
    background_amplitude: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi <= self.image_size):
            raise ConfigError(f"scale_range {self.scale_range} must lie within (0, {self.image_size}]")
        if any(b2 <= b1 for b1, b2 in zip(self.size_bands, self.size_bands[1:])):
            raise ConfigError(f"size_bands must be strictly increasing, got {self.size_bands}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.num_images < 0 or self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ConfigError("num_images must be >= 0 and objects_min/max must satisfy 1 <= min <= max")
        if not 0 <= self.background_amplitude <= 1:
            raise ConfigError(f"background_amplitude must be in [0,1], got {self.background_amplitude}")

    def band_intervals(self) -> list[tuple[float, float]]:
        """Side-length bands clipped to scale_range (empty bands dropped)."""
        lo, hi = self.scale_range
        edges = [lo] + [b for b in self.size_bands if lo < b < hi] + [hi]
        return [(a, b) for a, b in zip(edges, edges[1:]) if b > a]


# Class palette: (shape, primary color, secondary color). Shapes cycle for
# num_classes > 3; colors rotate so every class stays distinct.  The solid
# fill goes on the disk: its tight box keeps noisy background corners, so
# even the texture-free class has scale-dependent features.
_SHAPES = ("disk", "square", "triangle")
_COLORS = (
    ((0.95, 0.25, 0.20), (0.95, 0.25, 0.20)),  # solid
    ((0.15, 0.55, 0.95), (0.90, 0.90, 0.30)),  # stripes
    ((0.20, 0.85, 0.35), (0.60, 0.15, 0.80)),  # checker
)


def _class_style(class_id: int) -> tuple[str, np.ndarray, np.ndarray]:
    shape = _SHAPES[(class_id - 1) % len(_SHAPES)]
    c1, c2 = _COLORS[(class_id - 1) % len(_COLORS)]
    # rotate hue deterministically for classes beyond the base palette
    shift = ((class_id - 1) // len(_SHAPES)) % 3
    c1 = np.roll(np.asarray(c1, dtype=np.float32), shift)
    c2 = np.roll(np.asarray(c2, dtype=np.float32), shift)
    return shape, c1, c2


def _paint_object(px: np.ndarray, x1: int, y1: int, side: int, class_id: int) -> None:
    """Rasterize one object into a 3xHxW pixel array (values in [0,1]).

    Fill-texture periods scale with the object so an object looks the same
    at every size (the scale-normalized patch of a small instance matches
    that of a large one, as for real-world objects).
    """
    shape, c1, c2 = _class_style(class_id)
    yy, xx = np.mgrid[0:side, 0:side]
    if shape == "square":
        mask = np.ones((side, side), dtype=bool)
    elif shape == "disk":
        r = side / 2.0
        mask = (yy + 0.5 - r) ** 2 + (xx + 0.5 - r) ** 2 <= r * r
    else:  # triangle: apex at top center, base at the bottom
        frac = (yy + 0.5) / side
        mask = np.abs(xx + 0.5 - side / 2.0) <= frac * side / 2.0
    period = max(2, side // 3)
    stripes = (yy % period) < period // 2
    checker = ((yy % period) < period // 2) ^ ((xx % period) < period // 2)
    pattern = {"disk": np.ones_like(stripes), "square": stripes, "triangle": checker}[shape]
    tile = np.where(pattern[None], c1[:, None, None], c2[:, None, None])
    region = px[:, y1 : y1 + side, x1 : x1 + side]
    region[:, mask] = tile[:, mask]


def _place_objects(cfg: DatasetConfig, rng: np.random.Generator, image_id: int) -> tuple[np.ndarray, list[Annotation], int]:
    size = cfg.image_size
    noise = rng.random((3, size, size), dtype=np.float64)
    px = np.clip(0.5 + cfg.background_amplitude * (noise - 0.5), 0.0, 1.0).astype(np.float32)
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    bands = cfg.band_intervals()
    anns: list[Annotation] = []
    skipped = 0
    for _ in range(n_obj):
        class_id = int(rng.integers(1, cfg.num_classes + 1))
        lo, hi = bands[int(rng.integers(0, len(bands)))]
        side = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
        side = max(4, min(side, size))
        placed = False
        for _attempt in range(PLACEMENT_RETRIES):
            x1 = int(rng.integers(0, size - side + 1))
            y1 = int(rng.integers(0, size - side + 1))
            box = RoI(x1=float(x1), y1=float(y1), x2=float(x1 + side), y2=float(y1 + side), image_id=image_id)
            grown = RoI(
                x1=box.x1 - MIN_GAP, y1=box.y1 - MIN_GAP, x2=box.x2 + MIN_GAP, y2=box.y2 + MIN_GAP, image_id=image_id
            )
            if any(box_iou(grown, a.box) > 0 for a in anns):
                continue
            _paint_object(px, x1, y1, side, class_id)
            anns.append(Annotation(box=box, class_id=class_id))
            placed = True
            break
        if not placed:
            skipped += 1
    # quantize so in-memory pixels match a PPM round-trip exactly
    px = (np.round(px * 255.0).astype(np.uint8).astype(np.float32)) / 255.0
    return px[None], anns, skipped


def generate_dataset_with_stats(cfg: DatasetConfig) -> tuple[list[tuple[Image, list[Annotation]]], list[int]]:
    """Generate all images; also report skipped placements per image."""
    samples: list[tuple[Image, list[Annotation]]] = []
    skips: list[int] = []
    for i in range(cfg.num_images):
        rng = derive(cfg.seed, STREAM_DATA, i)
        px, anns, skipped = _place_objects(cfg, rng, i)
        samples.append((Image(pixels=Tensor(px), id=i), anns))
        skips.append(skipped)
    return samples, skips


def generate_dataset(cfg: DatasetConfig) -> list[tuple[Image, list[Annotation]]]:
    """Deterministic dataset: a pure function of the config (incl. its seed)."""
    return generate_dataset_with_stats(cfg)[0]


def make_proposals(
    gts: list[Annotation],
    n_pos_jitter: int,
    n_neg: int,
    rng: np.random.Generator,
    image_size: int,
    jitter: float = 0.25,
) -> list[RoI]:
    """Candidate boxes: jittered ground-truth copies plus random negatives.

    Each ground truth yields ``n_pos_jitter`` copies with center and size
    perturbed by up to +/-``jitter`` (zero amplitude gives exact copies);
    ``n_neg`` boxes are sampled uniformly.  All proposals are clamped
    inside the image.
    """
    out: list[RoI] = []
    image_id = gts[0].box.image_id if gts else 0
    for gt in gts:
        for _ in range(n_pos_jitter):
            w, h = gt.box.width, gt.box.height
            cx = gt.box.x1 + w / 2 + rng.uniform(-jitter, jitter) * w
            cy = gt.box.y1 + h / 2 + rng.uniform(-jitter, jitter) * h
            nw = w * (1 + rng.uniform(-jitter, jitter))
            nh = h * (1 + rng.uniform(-jitter, jitter))
            out.append(_clamped_roi(cx, cy, nw, nh, image_size, gt.box.image_id))
    for _ in range(n_neg):
        w = rng.uniform(6.0, image_size / 2)
        h = rng.uniform(6.0, image_size / 2)
        cx = rng.uniform(w / 2, image_size - w / 2)
        cy = rng.uniform(h / 2, image_size - h / 2)
        out.append(_clamped_roi(cx, cy, w, h, image_size, image_id))
    return out


def _clamped_roi(cx: float, cy: float, w: float, h: float, image_size: int, image_id: int) -> RoI:
    x1 = max(0.0, cx - w / 2)
    y1 = max(0.0, cy - h / 2)
    x2 = min(float(image_size), cx + w / 2)
    y2 = min(float(image_size), cy + h / 2)
    if x2 - x1 < 2.0:
        x1, x2 = max(0.0, min(x1, image_size - 2.0)), max(2.0, min(float(image_size), x1 + 2.0))
    if y2 - y1 < 2.0:
        y1, y2 = max(0.0, min(y1, image_size - 2.0)), max(2.0, min(float(image_size), y1 + 2.0))
    return RoI(x1=x1, y1=y1, x2=x2, y2=y2, image_id=image_id)


def proposal_rng(seed: int, image_id: int) -> np.random.Generator:
    """Evaluation-time proposal stream for one image."""
    return derive(seed, STREAM_EVAL, image_id)


def scale_statistics(dataset: list[tuple[Image, list[Annotation]]]) -> dict[int, tuple[float, float]]:
    """Per-class (median, population stddev) of annotation areas."""
    areas: dict[int, list[float]] = {}
    for _, anns in dataset:
        for a in anns:
            areas.setdefault(a.class_id, []).append(a.box.area)
    if not areas:
        raise SanlabError("scale_statistics needs at least one annotation")
    return {c: (float(np.median(v)), float(np.std(v))) for c, v in sorted(areas.items())}


# ---------------------------------------------------------------------------
# on-disk format


def write_ppm(path: Path, img: Image) -> None:
    px = img.pixels.data[0]  # 3xHxW in [0,1]
    arr = np.round(px * 255.0).astype(np.uint8).transpose(1, 2, 0)  # HxWx3
    with open(path, "wb") as f:
        f.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary PPM into a 1x3xHxW float32 array in [0,1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise SanlabError(f"{path} is not a binary PPM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise SanlabError(f"{path}: only maxval 255 supported, got {maxval}")
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def image_file_name(image_id: int) -> str:
    return f"img_{image_id:05d}.ppm"


def write_dataset(out_dir: Path, dataset: list[tuple[Image, list[Annotation]]], skips: list[int] | None = None) -> Path:
    """Write PPM files plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.txt"
    lines: list[str] = []
    for idx, (img, anns) in enumerate(dataset):
        name = image_file_name(img.id)
        write_ppm(out_dir / name, img)
        lines.append(name)
        for a in anns:
            b = a.box
            lines.append(f"{a.class_id} {b.x1:g} {b.y1:g} {b.x2:g} {b.y2:g}")
        if skips and skips[idx]:
            lines.append(f"# skipped {skips[idx]}")
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def load_dataset(data_dir: Path) -> list[tuple[Image, list[Annotation]]]:
    """Read a manifest + PPM tree back into memory."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise SanlabError(f"no manifest.txt under {data_dir}")
    dataset: list[tuple[Image, list[Annotation]]] = []
    current: list[Annotation] | None = None
    image_id = -1
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) == 1:
            image_id = int(parts[0].split("_")[1].split(".")[0])
            px = read_ppm(data_dir / parts[0])
            current = []
            dataset.append((Image(pixels=Tensor(px), id=image_id), current))
        else:
            if current is None:
                raise SanlabError(f"manifest annotation before any image line: {line!r}")
            c, x1, y1, x2, y2 = parts
            current.append(
                Annotation(
                    box=RoI(x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2), image_id=image_id),
                    class_id=int(c),
                )
            )
    return dataset


def write_scale_statistics_csv(path: Path, stats: dict[int, tuple[float, float]]) -> None:
    lines = ["class,median_area,std_area"]
    for c, (med, std) in stats.items():
        lines.append(f"{c},{med:.6g},{std:.6g}")
    Path(path).write_text("\n".join(lines) + "\n")
