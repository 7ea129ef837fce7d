"""Routing metrics, reference routers and rate sweeps.

Conventions:

* A record "wins" when its routed image is at least as good as the cloud
  image. Cloud-routed records always win; an edge-routed record wins iff its
  true relative-superiority score is >= 0.5.
* Baselines are evaluated at the router's realised cloud count on the
  evaluation split, so all three win rates refer to the same rate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvalidInputError
from .quality import DEFAULT_DENOM_FLOOR
from .strategy import CLOUD, EDGE, _max_count, calibrate_threshold, destination

DEFAULT_GRID = tuple(round(i / 10, 10) for i in range(11))
REPORT_RATES = (0.4, 0.5, 0.6, 0.7, 0.8)


def _cloud_mask(destinations: Sequence[str]) -> np.ndarray:
    dest = np.asarray(destinations)
    bad = ~np.isin(dest, (EDGE, CLOUD))
    if bad.any():
        raise InvalidInputError(f"unknown destination {dest[bad][0]!r}")
    return dest == CLOUD


def win_rate(destinations: Sequence[str], true_prs: Sequence[float]) -> float:
    prs = np.asarray(true_prs, dtype=np.float64)
    if prs.size == 0:
        raise InvalidInputError("win rate of an empty set")
    if len(destinations) != prs.size:
        raise DimensionError("one destination per record")
    cloud = _cloud_mask(destinations)
    return float(np.mean(cloud | (prs >= 0.5)))


def routed_count(p: float, n: int) -> int:
    """floor(p * n), immune to rounding such as 0.29 * 100 = 28.999..."""
    return _max_count(p, n)


def oracle_route(true_prs: Sequence[float], ids: Sequence[str], p: float) -> list[str]:
    """Send the floor(p*M) records with the lowest true score to the cloud."""
    prs = np.asarray(true_prs, dtype=np.float64)
    m = routed_count(p, prs.size)
    order = sorted(range(prs.size), key=lambda i: (prs[i], ids[i]))
    dest = [EDGE] * prs.size
    for i in order[:m]:
        dest[i] = CLOUD
    return dest


def oracle_route_count(true_prs: Sequence[float], ids: Sequence[str], m: int) -> list[str]:
    n = len(true_prs)
    return oracle_route(true_prs, ids, m / n if n else 0.0)


def random_route(n: int, p: float, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=routed_count(p, n), replace=False)
    dest = np.full(n, EDGE, dtype=object)
    dest[chosen] = CLOUD
    return list(dest)


def expected_random_win_rate(true_prs: Sequence[float], p: float) -> float:
    edge_win = float(np.mean(np.asarray(true_prs, dtype=np.float64) >= 0.5))
    return p + (1.0 - p) * edge_win


def expected_random_delta_p(edge_means, cloud_means, p: float,
                            denom_floor: float = DEFAULT_DENOM_FLOOR) -> float:
    """Mixing means linearly gives p * (mu_c - mu_e) per metric; this is p
    exactly when the cloud side is ahead on every metric."""
    e = np.asarray(edge_means, dtype=np.float64)
    c = np.asarray(cloud_means, dtype=np.float64)
    return relative_performance_improvement(e + p * (c - e), e, c, denom_floor)


def normalized_win_rate_improvement(w_router: float, w_baseline: float,
                                    w_oracle: float) -> float | None:
    """Share of the oracle's win-rate gain over the baseline that the router
    recovers. ``None`` when the oracle does no better than the baseline."""
    denom = w_oracle - w_baseline
    if abs(denom) < 1e-15:
        return None
    return (w_router - w_baseline) / denom


def routed_means(q_edge, q_cloud, destinations) -> np.ndarray:
    qe = np.asarray(q_edge, dtype=np.float64)
    qc = np.asarray(q_cloud, dtype=np.float64)
    cloud = _cloud_mask(destinations)[:, None]
    return np.where(cloud, qc, qe).mean(axis=0)


def relative_performance_improvement(routed, edge, cloud,
                                     denom_floor: float = DEFAULT_DENOM_FLOOR) -> float:
    r, e, c = (np.asarray(a, dtype=np.float64) for a in (routed, edge, cloud))
    if not r.shape == e.shape == c.shape or r.ndim != 1:
        raise DimensionError("routed, edge and cloud means must be equal-length vectors")
    return float(np.mean((r - e) / np.maximum(np.abs(c - e), denom_floor)))


def interpolate_rate(rates: Sequence[float], delta_ps: Sequence[float],
                     target: float) -> float | None:
    """Smallest rate at which the piecewise-linear (rate, dP) curve reaches
    ``target``; ``None`` if it never does."""
    pts = sorted(zip(rates, delta_ps))
    if not pts:
        return None
    if pts[0][1] >= target:
        return float(pts[0][0])
    for (p0, d0), (p1, d1) in zip(pts[:-1], pts[1:]):
        if d1 >= target > d0:
            return float(p0 + (target - d0) * (p1 - p0) / (d1 - d0))
    return None


def cost_saving(rates: Sequence[float], delta_ps: Sequence[float], target: float,
                baseline_slope: float = 1.0) -> float | None:
    """Relative reduction in cloud rate versus random routing at a dP target.

    Random routing reaches ``target`` at ``target / baseline_slope`` (slope 1
    when the cloud side leads on every metric).
    """
    p_b = target / baseline_slope if baseline_slope else None
    p_r = interpolate_rate(rates, delta_ps, target)
    if p_r is None or p_b is None or p_b <= 0:
        return None
    return (p_b - p_r) / p_b


@dataclass
class RateResult:
    p: float
    p_effective: float
    alpha: float | None
    win_router: float
    win_random: float
    win_oracle: float
    win_edge_only: float
    delta_w: float | None
    delta_p: float
    delta_p_random: float
    delta_p_oracle: float
    routed_means: np.ndarray = field(repr=False)
    oracle_means: np.ndarray = field(repr=False)


def evaluate_destinations(ids: Sequence[str], q_edge, q_cloud, true_prs,
                          destinations: Sequence[str], p: float | None = None,
                          alpha: float | None = None,
                          denom_floor: float = DEFAULT_DENOM_FLOOR) -> RateResult:
    qe = np.asarray(q_edge, dtype=np.float64)
    qc = np.asarray(q_cloud, dtype=np.float64)
    prs = np.asarray(true_prs, dtype=np.float64)
    n = prs.size
    if n == 0:
        raise InvalidInputError("nothing to evaluate")
    cloud = _cloud_mask(destinations)
    m = int(cloud.sum())
    p_eff = m / n
    mu_e, mu_c = qe.mean(axis=0), qc.mean(axis=0)

    oracle = oracle_route_count(prs, ids, m)
    w_r = win_rate(destinations, prs)
    w_o = win_rate(oracle, prs)
    w_b = expected_random_win_rate(prs, p_eff)
    routed = routed_means(qe, qc, destinations)
    oracle_mu = routed_means(qe, qc, oracle)
    return RateResult(
        p=p_eff if p is None else p, p_effective=p_eff, alpha=alpha,
        win_router=w_r, win_random=w_b, win_oracle=w_o,
        win_edge_only=float(np.mean(prs >= 0.5)),
        delta_w=normalized_win_rate_improvement(w_r, w_b, w_o),
        delta_p=relative_performance_improvement(routed, mu_e, mu_c, denom_floor),
        delta_p_random=expected_random_delta_p(mu_e, mu_c, p_eff, denom_floor),
        delta_p_oracle=relative_performance_improvement(oracle_mu, mu_e, mu_c, denom_floor),
        routed_means=routed, oracle_means=oracle_mu)


@dataclass
class SweepResult:
    results: list[RateResult]
    metric_names: list[str]
    edge_means: np.ndarray
    cloud_means: np.ndarray

    def at(self, p: float) -> RateResult:
        for r in self.results:
            if abs(r.p - p) < 1e-12:
                return r
        raise KeyError(p)

    def cost_saving(self, target: float, denom_floor: float = DEFAULT_DENOM_FLOOR):
        slope = expected_random_delta_p(self.edge_means, self.cloud_means, 1.0, denom_floor)
        return cost_saving([r.p_effective for r in self.results],
                           [r.delta_p for r in self.results], target, slope)


def sweep(calib_predictions, eval_ids, eval_predictions, q_edge, q_cloud, true_prs,
          metric_names: Sequence[str], grid: Sequence[float] = DEFAULT_GRID,
          denom_floor: float = DEFAULT_DENOM_FLOOR) -> SweepResult:
    """Recalibrate alpha on the calibration predictions for every rate in
    ``grid`` and evaluate the resulting routing on the evaluation split."""
    grid = sorted(set(float(p) for p in grid))
    if any(not 0.0 <= p <= 1.0 for p in grid):
        raise InvalidInputError("routing rates must lie in [0, 1]")
    results = []
    for p in grid:
        alpha = calibrate_threshold(calib_predictions, p)
        dest = [destination(float(v), alpha) for v in eval_predictions]
        results.append(evaluate_destinations(eval_ids, q_edge, q_cloud, true_prs, dest,
                                             p=p, alpha=alpha, denom_floor=denom_floor))
    qe = np.asarray(q_edge, dtype=np.float64)
    qc = np.asarray(q_cloud, dtype=np.float64)
    return SweepResult(results, list(metric_names), qe.mean(axis=0), qc.mean(axis=0))


# --------------------------------------------------------------------------- CSV output

def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


SWEEP_COLUMNS = ["p", "p_effective", "alpha", "metric", "routed_mean", "oracle_mean",
                 "edge_mean", "cloud_mean", "win_router", "win_random", "win_oracle",
                 "delta_w", "delta_p", "delta_p_random", "delta_p_oracle"]


def sweep_csv(result: SweepResult) -> str:
    """Long format: one row per (rate, metric)."""
    rows: list[list] = [SWEEP_COLUMNS]
    for r in result.results:
        for i, name in enumerate(result.metric_names):
            rows.append([r.p, r.p_effective, r.alpha, name, float(r.routed_means[i]),
                         float(r.oracle_means[i]), float(result.edge_means[i]),
                         float(result.cloud_means[i]), r.win_router, r.win_random,
                         r.win_oracle, r.delta_w, r.delta_p, r.delta_p_random,
                         r.delta_p_oracle])
    return _write_csv(rows)


def summary_csv(result: RateResult, metric_names: Sequence[str], edge_means,
                cloud_means) -> str:
    """One row per router with per-metric means and dP in percent."""
    edge_means = np.asarray(edge_means, dtype=np.float64)
    cloud_means = np.asarray(cloud_means, dtype=np.float64)
    random_means = edge_means + result.p_effective * (cloud_means - edge_means)
    rows: list[list] = [["router", *metric_names, "delta_p_pct", "win_rate", "delta_w_pct"]]
    rows.append(["edge", *map(float, edge_means), None, result.win_edge_only, None])
    rows.append(["cloud", *map(float, cloud_means), None, 1.0, None])
    rows.append(["random", *map(float, random_means), 100 * result.delta_p_random,
                 result.win_random, 0.0])
    rows.append(["oracle", *map(float, result.oracle_means), 100 * result.delta_p_oracle,
                 result.win_oracle, None if result.delta_w is None else 100.0])
    rows.append(["router", *map(float, result.routed_means), 100 * result.delta_p,
                 result.win_router,
                 None if result.delta_w is None else 100 * result.delta_w])
    return _write_csv(rows)
