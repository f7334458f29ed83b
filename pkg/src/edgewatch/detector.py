"""Violation detectors operating on simulated scene frames.

Two implementations share the ``detect(frame, rng_seed)`` protocol:

* :class:`ScriptedDetector` replays each frame's ground-truth labels with a
  configurable confidence, night penalty and Gaussian jitter.
* :class:`ToyDetector` is a logistic model over the frame feature vector. It
  follows the scikit-learn classifier protocol (``predict_proba``,
  ``predict``, ``get_params``) and can run on float or int8-quantized
  weights.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import quantkit
from .errors import DimensionMismatch

DEFAULT_DIM = 16
DEFAULT_INFERENCE_MS = 28.0
FULL_FRAME = (0.0, 0.0, 1.0, 1.0)


class DetectionClass(enum.IntEnum):
    DRIVER = 0
    PASSENGER = 1
    VIOLATION = 2

    @classmethod
    def parse(cls, value) -> "DetectionClass":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))

    @property
    def label(self) -> str:
        return self.name.capitalize()


class Lighting(str, enum.Enum):
    DAY = "day"
    NIGHT = "night"


def _check_bbox(bbox) -> tuple[float, float, float, float]:
    x, y, w, h = (float(c) for c in bbox)
    if not all(0.0 <= c <= 1.0 for c in (x, y, w, h)):
        raise ValueError(f"bbox coordinates must be in [0, 1]: {bbox}")
    if x + w > 1.0 + 1e-12 or y + h > 1.0 + 1e-12:
        raise ValueError(f"bbox extends past the frame: {bbox}")
    return (x, y, w, h)


@dataclass(frozen=True)
class TruthLabel:
    """Ground-truth object in a simulated frame.

    ``confidence``, when set, overrides the scripted detector's base
    confidence for this label so scenarios can pin exact scores.
    """

    cls: DetectionClass
    bbox: tuple[float, float, float, float] = FULL_FRAME
    confidence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "cls", DetectionClass.parse(self.cls))
        object.__setattr__(self, "bbox", _check_bbox(self.bbox))


@dataclass(frozen=True)
class SceneFrame:
    frame_id: int
    t_ms: int
    lighting: Lighting = Lighting.DAY
    features: tuple[float, ...] = ()
    truth: tuple[TruthLabel, ...] = ()

    def __post_init__(self):
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        object.__setattr__(self, "lighting", Lighting(self.lighting))
        object.__setattr__(self, "features", tuple(float(f) for f in self.features))
        object.__setattr__(self, "truth", tuple(self.truth))

    @property
    def has_violation(self) -> bool:
        return any(t.cls is DetectionClass.VIOLATION for t in self.truth)


@dataclass(frozen=True)
class Detection:
    cls: DetectionClass
    bbox: tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "cls", DetectionClass.parse(self.cls))
        object.__setattr__(self, "bbox", _check_bbox(self.bbox))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class DetectorProfile:
    inference_ms: float = DEFAULT_INFERENCE_MS
    noise_sigma: float = 0.0
    night_penalty: float = 0.0
    # relative log-normal spread of the simulated inference latency
    latency_jitter: float = 0.0

    def __post_init__(self):
        if not self.inference_ms > 0:
            raise ValueError("inference_ms must be positive")
        if self.noise_sigma < 0 or self.night_penalty < 0 or self.latency_jitter < 0:
            raise ValueError("noise_sigma, night_penalty and latency_jitter must be >= 0")

    def draw_inference_ms(self, rng: np.random.Generator) -> float:
        if self.latency_jitter == 0:
            return float(self.inference_ms)
        s = self.latency_jitter
        return float(self.inference_ms * math.exp(s * rng.standard_normal() - s * s / 2))


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass(frozen=True)
class ScriptedDetector:
    profile: DetectorProfile = field(default_factory=DetectorProfile)
    base_confidence: float = 0.9

    def detect(self, frame: SceneFrame, rng_seed: int) -> tuple[list[Detection], float]:
        rng = np.random.default_rng(rng_seed)
        detections = []
        for label in frame.truth:
            conf = self.base_confidence if label.confidence is None else label.confidence
            if frame.lighting is Lighting.NIGHT:
                conf -= self.profile.night_penalty
            if self.profile.noise_sigma > 0:
                conf += rng.normal(0.0, self.profile.noise_sigma)
            detections.append(Detection(label.cls, label.bbox, _clamp01(float(conf))))
        return detections, self.profile.draw_inference_ms(rng)


def _sigmoid(z):
    # split form avoids overflow in exp for large |z|
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ToyDetector(ClassifierMixin, BaseEstimator):
    """Logistic violation scorer ``sigmoid(w . features + b)``.

    Parameters
    ----------
    weights : array-like of shape (D,)
    bias : float
    mode : {"float", "quantized"}
        In quantized mode the weights are passed through an int8 affine
        quantize/dequantize round trip when the detector is fitted.
    threshold : float
        Decision threshold used by :meth:`predict`; strictly greater wins.
    emission_floor : float
        :meth:`detect` only emits a detection at or above this confidence.
    profile : DetectorProfile, optional

    Nothing is learned from data: ``fit`` freezes the effective weights into
    ``coef_`` (read-only) and, in quantized mode, keeps the packed tensor in
    ``quantized_``.
    """

    def __init__(self, weights=None, bias=0.0, mode="float", threshold=0.80,
                 emission_floor=0.05, profile=None):
        self.weights = weights
        self.bias = bias
        self.mode = mode
        self.threshold = threshold
        self.emission_floor = emission_floor
        self.profile = profile

    def fit(self, X=None, y=None):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise DimensionMismatch("weights must be a non-empty vector")
        if X is not None:
            X = check_array(X)
            if X.shape[1] != w.size:
                raise DimensionMismatch(f"weights have length {w.size}, features {X.shape[1]}")
        if self.mode == "float":
            self.quantized_ = None
            coef = w.copy()
        elif self.mode == "quantized":
            self.quantized_ = quantkit.quantize_affine(w)
            coef = quantkit.dequantize(self.quantized_)
        else:
            raise ValueError(f"mode must be 'float' or 'quantized', got {self.mode!r}")
        coef.flags.writeable = False
        self.coef_ = coef
        self.intercept_ = float(self.bias)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = w.size
        self.profile_ = self.profile if self.profile is not None else DetectorProfile()
        return self

    def _validate_X(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"detector expects {self.n_features_in_} features, got {X.shape[1]}"
            )
        return X

    def decision_function(self, X):
        X = self._validate_X(X)
        return X @ self.coef_ + self.intercept_

    def violation_confidence(self, X):
        return _sigmoid(self.decision_function(X))

    def predict_proba(self, X):
        p = self.violation_confidence(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.violation_confidence(X) > self.threshold).astype(int)

    def detect(self, frame: SceneFrame, rng_seed: int) -> tuple[list[Detection], float]:
        rng = np.random.default_rng(rng_seed)
        conf = float(self.violation_confidence(frame.features)[0])
        detections = []
        if conf >= self.emission_floor:
            detections.append(Detection(DetectionClass.VIOLATION, FULL_FRAME, _clamp01(conf)))
        return detections, self.profile_.draw_inference_ms(rng)


def build_toy_detector(weights, bias=0.0, mode="float", **kwargs) -> ToyDetector:
    return ToyDetector(weights=weights, bias=bias, mode=mode, **kwargs).fit()


def detect(detector, frame: SceneFrame, rng_seed: int) -> tuple[list[Detection], float]:
    """Run ``detector`` on one frame; outputs are a pure function of the inputs."""
    return detector.detect(frame, rng_seed)
