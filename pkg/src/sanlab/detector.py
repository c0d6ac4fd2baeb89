"""Estimator-style front end for the scale-aware detector.

``SanDetector`` follows the familiar fit/predict conventions: constructor
arguments are plain hyperparameters stored verbatim, ``fit`` trains on a
dataset of (image, annotations) pairs, ``predict`` scores proposal boxes,
and ``get_params`` / ``set_params`` make it composable with tooling that
expects that protocol.  Fitted state lives in trailing-underscore
attributes.
"""

from __future__ import annotations

import inspect
from pathlib import Path

from .analysis import ApResult, Detection
from .backbone import Image, RoI
from .data import Annotation
from .errors import ConfigError
from .san import SCHEME_PRESETS, ScalePartitionScheme
from .training import (
    DetectionModel,
    TrainingConfig,
    TrainResult,
    detect,
    evaluate_detector,
    load_checkpoint,
    save_checkpoint,
    train,
)


class NotFittedError(ConfigError):
    """predict/score was called before fit (or loading a checkpoint)."""


def resolve_scheme(scheme, ref_scale=None, boundaries=None) -> ScalePartitionScheme:
    """Accept a preset name, a scheme object, or explicit overrides."""
    if isinstance(scheme, str):
        if scheme not in SCHEME_PRESETS:
            raise ConfigError(f"unknown scheme preset {scheme!r}; choose from {sorted(SCHEME_PRESETS)}")
        base = SCHEME_PRESETS[scheme]
    elif isinstance(scheme, ScalePartitionScheme):
        base = scheme
    else:
        raise ConfigError(f"scheme must be a preset name or ScalePartitionScheme, got {type(scheme).__name__}")
    if ref_scale is None and boundaries is None:
        return base
    return ScalePartitionScheme(
        ref_scale=int(ref_scale) if ref_scale is not None else base.ref_scale,
        boundaries=tuple(boundaries) if boundaries is not None else base.boundaries,
    )


class SanDetector:
    """Trainable multi-scale shape detector with scale-aware correction.

    Parameters mirror TrainingConfig; ``scheme`` may be a preset name
    ("toy", "voc", "coco") optionally overridden by ``ref_scale`` /
    ``boundaries``.
    """

    def __init__(
        self,
        num_classes: int = 3,
        iterations: int = 2000,
        base_lr: float = 0.02,
        lr_decay_step: int = 1500,
        lr_decay_factor: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 0.0005,
        rois_per_image: int = 32,
        n_pos_jitter: int = 6,
        n_neg: int = 30,
        san: str = "full",
        init: str = "identity",
        gaussian_std: float = 0.05,
        san_pool: str = "avg",
        san_samples: int = 16,
        san_loss_weight: float = 1.0,
        scheme: str | ScalePartitionScheme = "toy",
        ref_scale: int | None = None,
        boundaries: tuple[float, ...] | None = None,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.iterations = iterations
        self.base_lr = base_lr
        self.lr_decay_step = lr_decay_step
        self.lr_decay_factor = lr_decay_factor
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.rois_per_image = rois_per_image
        self.n_pos_jitter = n_pos_jitter
        self.n_neg = n_neg
        self.san = san
        self.init = init
        self.gaussian_std = gaussian_std
        self.san_pool = san_pool
        self.san_samples = san_samples
        self.san_loss_weight = san_loss_weight
        self.scheme = scheme
        self.ref_scale = ref_scale
        self.boundaries = boundaries
        self.seed = seed

    # -- sklearn-style parameter plumbing ---------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "SanDetector":
        valid = set(self._param_names())
        for k, v in params.items():
            if k not in valid:
                raise ConfigError(f"unknown parameter {k!r} for SanDetector")
            setattr(self, k, v)
        return self

    # -- training ----------------------------------------------------------

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            iterations=self.iterations,
            base_lr=self.base_lr,
            lr_decay_step=self.lr_decay_step,
            lr_decay_factor=self.lr_decay_factor,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            rois_per_image=self.rois_per_image,
            n_pos_jitter=self.n_pos_jitter,
            n_neg=self.n_neg,
            num_classes=self.num_classes,
            san_mode=self.san,
            init_mode=self.init,
            gaussian_std=self.gaussian_std,
            san_pool=self.san_pool,
            san_samples=self.san_samples,
            san_loss_weight=self.san_loss_weight,
            scheme=resolve_scheme(self.scheme, self.ref_scale, self.boundaries),
            seed=self.seed,
        )

    def fit(self, dataset: list[tuple[Image, list[Annotation]]]) -> "SanDetector":
        result: TrainResult = train(dataset, self.training_config())
        self.model_ = result.model
        self.log_ = result.log_rows
        return self

    def _require_fitted(self) -> DetectionModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("this SanDetector is not fitted; call fit() or load()")
        return model

    # -- inference ---------------------------------------------------------

    def predict(self, img: Image, proposals: list[RoI], score_thresh: float = 0.05, nms_iou: float = 0.3) -> list[Detection]:
        """Detections for explicit proposal boxes on one image."""
        return detect(self._require_fitted(), img, proposals, score_thresh=score_thresh, nms_iou=nms_iou)

    def score(self, dataset: list[tuple[Image, list[Annotation]]], seed: int | None = None) -> float:
        """Mean average precision over a dataset with jittered proposals."""
        ap, _ = self.evaluate(dataset, seed=seed)
        return ap.mean_ap

    def evaluate(self, dataset, seed: int | None = None) -> tuple[ApResult, list[Detection]]:
        return evaluate_detector(self._require_fitted(), dataset, seed=self.seed if seed is None else seed)

    # -- persistence ---------------------------------------------------------

    def save(self, path: Path) -> None:
        save_checkpoint(Path(path), self._require_fitted())

    @classmethod
    def load(cls, path: Path) -> "SanDetector":
        model = load_checkpoint(Path(path))
        det = cls(
            num_classes=model.num_classes,
            san="full" if model.san is not None else "off",
            scheme=model.scheme,
        )
        det.model_ = model
        det.log_ = []
        return det
