"""Budgets, the cloud-rate bound, threshold calibration and routing decisions."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError
from .router import Checkpoint

ALPHA_CAP = 0.5
EDGE, CLOUD = "edge", "cloud"


@dataclass(frozen=True)
class Budget:
    """Per-request cost and latency budget.

    ``fee_budget`` is the amortised fee allowance per request and
    ``cloud_cost`` the fee of one cloud call. Latencies: ``cloud_latency``
    includes communication; ``router_latency`` is the router's own cost.
    ``time_budget`` defaults to no latency constraint.
    """

    cloud_cost: float
    fee_budget: float
    time_budget: float = math.inf
    cloud_latency: float = 0.0
    edge_latency: float = 0.0
    router_latency: float = 0.0

    def __post_init__(self):
        for name in ("cloud_cost", "fee_budget", "time_budget", "cloud_latency",
                     "edge_latency", "router_latency"):
            v = getattr(self, name)
            if math.isnan(v) or v < 0:
                raise ConfigError(f"budget field {name} must be non-negative, got {v}")


def budget_to_rate(b: Budget) -> float:
    """Largest cloud routing rate both budget constraints allow, in [0, 1]."""
    fee_bound = math.inf if b.cloud_cost == 0 else b.fee_budget / b.cloud_cost
    latency_binding = b.cloud_latency + b.router_latency > b.time_budget
    if not latency_binding:
        time_bound = math.inf
    elif b.cloud_latency <= b.edge_latency:
        raise ConfigError("cloud latency must exceed edge latency when the latency "
                          "budget binds")
    else:
        time_bound = ((b.time_budget - b.edge_latency - b.router_latency)
                      / (b.cloud_latency - b.edge_latency))
    return float(min(max(min(fee_bound, time_bound), 0.0), 1.0))


def _max_count(rho: float, n: int) -> int:
    """Largest m with m / n <= rho, robust to float rounding of rho * n."""
    m = min(n, max(0, math.floor(rho * n)))
    while m < n and (m + 1) / n <= rho:
        m += 1
    while m > 0 and m / n > rho:
        m -= 1
    return m


def calibrate_threshold(predicted_prs: Sequence[float], rho: float) -> float:
    """Threshold alpha such that the share of predictions strictly below it
    is at most ``rho``, as large as possible, capped at 1/2."""
    preds = np.sort(np.asarray(predicted_prs, dtype=np.float64))
    if preds.size == 0:
        raise InvalidInputError("calibration needs at least one prediction")
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"routing-rate bound must be in [0, 1], got {rho}")
    m = _max_count(rho, preds.size)
    # every v <= preds[m] has at most m predictions strictly below it
    v = math.inf if m >= preds.size else float(preds[m])
    return min(v, ALPHA_CAP)


def destination(predicted_prs: float, alpha: float) -> str:
    # a tie stays on the edge
    return CLOUD if predicted_prs < alpha else EDGE


@dataclass(frozen=True)
class RoutingPolicy:
    alpha: float
    rho: float
    checkpoint: str | None = None
    checkpoint_sha256: str | None = None

    def __post_init__(self):
        if not (self.alpha <= ALPHA_CAP) or math.isnan(self.alpha):
            raise ConfigError(f"alpha must be <= {ALPHA_CAP}, got {self.alpha}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "rho": self.rho, "checkpoint": self.checkpoint,
                "checkpoint_sha256": self.checkpoint_sha256}

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RoutingPolicy":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(float(doc["alpha"]), float(doc["rho"]), doc.get("checkpoint"),
                       doc.get("checkpoint_sha256"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ParseError(f"malformed policy file {path}: {exc}") from exc


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class RoutingDecision:
    id: str
    destination: str
    predicted_prs: float
    alpha: float

    def to_dict(self) -> dict:
        return {"id": self.id, "route": self.destination, "prs": self.predicted_prs,
                "alpha": self.alpha}

    def to_line(self) -> str:
        return json.dumps(self.to_dict())


def route(record_id: str, tokens: Sequence[int], checkpoint: Checkpoint,
          policy: RoutingPolicy) -> RoutingDecision:
    prs = float(checkpoint.predict_prs([tokens])[0])
    return RoutingDecision(record_id, destination(prs, policy.alpha), prs, policy.alpha)


def route_many(ids: Sequence[str], token_lists, checkpoint: Checkpoint,
               policy: RoutingPolicy) -> list[RoutingDecision]:
    return [route(i, t, checkpoint, policy) for i, t in zip(ids, token_lists)]
