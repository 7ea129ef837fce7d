"""Contrastive image quality, per-metric quality distances and the
relative-superiority score used as routing supervision.

Similarities (image vs. positive/negative text) arrive precomputed; nothing
here touches an encoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InvalidInputError

DEFAULT_GAMMA = 1.0
DEFAULT_DENOM_FLOOR = 1e-6


def sigmoid(x):
    """Numerically stable logistic function for scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class MetricSpec:
    name: str
    positive_text: str
    negative_text: str
    weight: float


@dataclass(frozen=True)
class MetricSet:
    metrics: tuple[MetricSpec, ...]

    def __post_init__(self):
        if len(self.metrics) < 1:
            raise ConfigError("metric set must contain at least one metric")
        w = self.weights
        if np.any(w < 0) or np.any(w > 1):
            raise ConfigError("metric weights must lie in [0, 1]")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"metric weights sum to {w.sum()!r}, expected 1")

    def __len__(self):
        return len(self.metrics)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.metrics]

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.metrics], dtype=np.float64)

    def with_weights(self, weights: Sequence[float]) -> "MetricSet":
        if len(weights) != len(self.metrics):
            raise DimensionError(f"got {len(weights)} weights for {len(self.metrics)} metrics")
        return MetricSet(tuple(
            MetricSpec(m.name, m.positive_text, m.negative_text, float(w))
            for m, w in zip(self.metrics, weights)))

    @classmethod
    def uniform(cls, names: Sequence[str]) -> "MetricSet":
        n = len(names)
        return cls(tuple(MetricSpec(name, "", "", 1.0 / n) for name in names))

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricSet":
        try:
            items = doc["metrics"]
            specs = [
                MetricSpec(m["name"], m.get("positive", ""), m.get("negative", ""),
                           float(m.get("weight", 1.0 / len(items))))
                for m in items
            ]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed metric file: {exc}") from exc
        return cls(tuple(specs))

    def to_dict(self) -> dict:
        return {"metrics": [
            {"name": m.name, "positive": m.positive_text,
             "negative": m.negative_text, "weight": m.weight}
            for m in self.metrics]}


def load_metric_set(path: str | Path | None = None) -> MetricSet:
    """Load a metric file; ``None`` gives the shipped ten-metric default."""
    if path is None:
        text = resources.files("prsroute.resources").joinpath("metrics.json").read_text()
    else:
        text = Path(path).read_text()
    return MetricSet.from_dict(json.loads(text))


@dataclass(frozen=True)
class SimilarityPair:
    sim_positive: float
    sim_negative: float


@dataclass(frozen=True)
class DistanceParams:
    """Temperature, denominator floor and per-metric set means for both sides."""

    gamma: float
    denom_floor: float
    mu_edge: np.ndarray = field(repr=False)
    mu_cloud: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"temperature must be positive, got {self.gamma}")
        if not self.denom_floor > 0:
            raise ConfigError(f"denominator floor must be positive, got {self.denom_floor}")
        mu_e = np.asarray(self.mu_edge, dtype=np.float64)
        mu_c = np.asarray(self.mu_cloud, dtype=np.float64)
        if mu_e.shape != mu_c.shape or mu_e.ndim != 1:
            raise DimensionError("mu_edge and mu_cloud must be 1-D arrays of equal length")
        object.__setattr__(self, "mu_edge", mu_e)
        object.__setattr__(self, "mu_cloud", mu_c)

    @property
    def n_metrics(self) -> int:
        return len(self.mu_edge)

    def denominators(self) -> np.ndarray:
        gap = np.maximum(np.abs(self.mu_edge - self.mu_cloud), self.denom_floor)
        return self.gamma * gap

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "denom_floor": self.denom_floor,
                "mu_edge": self.mu_edge.tolist(), "mu_cloud": self.mu_cloud.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "DistanceParams":
        return cls(float(doc["gamma"]), float(doc["denom_floor"]),
                   np.array(doc["mu_edge"], dtype=np.float64),
                   np.array(doc["mu_cloud"], dtype=np.float64))


def _check_finite(*values):
    for v in values:
        if not math.isfinite(v):
            raise InvalidInputError(f"non-finite similarity {v!r}")


def contrastive_quality(sim: SimilarityPair) -> float:
    _check_finite(sim.sim_positive, sim.sim_negative)
    return sigmoid(sim.sim_positive - sim.sim_negative)


def quality_vector(sims: Sequence[SimilarityPair], n_metrics: int | None = None) -> np.ndarray:
    """Per-metric contrastive qualities, in metric order."""
    if n_metrics is not None and len(sims) != n_metrics:
        raise DimensionError(f"expected {n_metrics} similarity pairs, got {len(sims)}")
    return np.array([contrastive_quality(s) for s in sims], dtype=np.float64)


def quality_distance(q_edge: float, q_cloud: float, metric_index: int,
                     params: DistanceParams) -> float:
    if not 0 <= metric_index < params.n_metrics:
        raise DimensionError(f"metric index {metric_index} out of range")
    gap = max(abs(params.mu_edge[metric_index] - params.mu_cloud[metric_index]),
              params.denom_floor)
    return sigmoid((q_edge - q_cloud) / (params.gamma * gap))


def distances(q_edge, q_cloud, params: DistanceParams) -> np.ndarray:
    """Vectorised quality distances. Inputs shaped (N,) or (records, N)."""
    q_edge = np.asarray(q_edge, dtype=np.float64)
    q_cloud = np.asarray(q_cloud, dtype=np.float64)
    if q_edge.shape != q_cloud.shape or q_edge.shape[-1] != params.n_metrics:
        raise DimensionError(
            f"quality shapes {q_edge.shape} / {q_cloud.shape} do not match "
            f"{params.n_metrics} metrics")
    return sigmoid((q_edge - q_cloud) / params.denominators())


def _weights_of(weights) -> np.ndarray:
    if isinstance(weights, MetricSet):
        return weights.weights
    return np.asarray(weights, dtype=np.float64)


def prs(q_edge, q_cloud, weights, params: DistanceParams):
    """Weighted relative superiority of the edge image over the cloud image.

    Values above 0.5 favour the edge side. Accepts single vectors or stacked
    rows; ``weights`` may be a :class:`MetricSet` or a plain array.
    """
    w = _weights_of(weights)
    q_edge = np.asarray(q_edge, dtype=np.float64)
    q_cloud = np.asarray(q_cloud, dtype=np.float64)
    if q_edge.shape != q_cloud.shape or q_edge.shape[-1] != params.n_metrics:
        raise DimensionError(
            f"quality shapes {q_edge.shape} / {q_cloud.shape} do not match "
            f"{params.n_metrics} metrics")
    if w.shape != (params.n_metrics,):
        raise DimensionError(f"{w.shape[0]} weights for {params.n_metrics} metrics")
    # centred form: sigma(z) - 1/2 = tanh(z/2)/2, so identical inputs give exactly 0.5
    # even when the weights only sum to 1 up to rounding
    z = (q_edge - q_cloud) / params.denominators()
    # row-wise sum rather than matmul so one record and a stack agree bit-for-bit
    out = 0.5 + np.sum(0.5 * np.tanh(0.5 * z) * w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mean_qualities(qualities: Iterable) -> np.ndarray:
    q = np.asarray(list(qualities), dtype=np.float64)
    if q.ndim != 2 or len(q) == 0:
        raise DimensionError("need a non-empty stack of quality vectors")
    return q.mean(axis=0)


@dataclass(frozen=True)
class ScaleSpaceSpec:
    vocab_size: int
    max_len: int
    width: int
    height: int
    color_depth: int

    def __post_init__(self):
        for name in ("vocab_size", "max_len", "width", "height", "color_depth"):
            if int(getattr(self, name)) <= 0:
                raise InvalidInputError(f"{name} must be positive")


def text_space_log_size(vocab_size: int, max_len: int) -> float:
    return max_len * math.log(vocab_size)


def image_space_log_size(width: int, height: int, color_depth: int) -> float:
    return height * width * color_depth * math.log(2.0)


def scale_ratio(spec: ScaleSpaceSpec) -> float:
    """Natural log of (image-space size / text-space size).

    Computed in the log domain: ``H*W*depth*ln2 - L*ln|V|``.
    """
    return (image_space_log_size(spec.width, spec.height, spec.color_depth)
            - text_space_log_size(spec.vocab_size, spec.max_len))
