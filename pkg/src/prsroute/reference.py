"""Recompute dP from published per-metric mean tables.

The shipped fixture ``resources/reference_tables.json`` holds, for each
edge/cloud model pair, the printed edge, cloud and per-router mean
qualities (rounded to 4 decimals) together with the printed dP. The
printed means are rounded, so a metric whose edge/cloud gap is only a few
units in the last place can move the recomputed dP a long way; see
:func:`delta_p_bounds` for the range the rounding allows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .evaluation import relative_performance_improvement

PRINT_HALF_ULP = 0.5e-4


def load_reference_tables(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("prsroute.resources").joinpath("reference_tables.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ReproducedRow:
    table: str
    group: str
    router: str
    delta_p: float              # fraction, e.g. 0.8414
    reported: float | None      # fraction
    min_gap: float

    @property
    def error_pp(self) -> float | None:
        if self.reported is None:
            return None
        return 100.0 * (self.delta_p - self.reported)


def reproduce_tables(doc: dict | None = None) -> list[ReproducedRow]:
    doc = load_reference_tables() if doc is None else doc
    rows = []
    for table in doc["tables"]:
        edge = np.array(table["edge"], dtype=np.float64)
        cloud = np.array(table["cloud"], dtype=np.float64)
        min_gap = float(np.min(np.abs(cloud - edge)))
        for name, entry in table["routers"].items():
            dp = relative_performance_improvement(entry["means"], edge, cloud)
            reported = entry.get("reported_delta_p")
            rows.append(ReproducedRow(table["name"], table.get("group", ""), name, dp,
                                      None if reported is None else reported / 100.0,
                                      min_gap))
    return rows


def delta_p_bounds(routed, edge, cloud, half_ulp: float = PRINT_HALF_ULP) -> tuple[float, float]:
    """Smallest and largest dP consistent with every input being rounded.

    Each metric's term depends only on its own three values, so the extremes
    are found per metric over the corners of the rounding box (the term is
    monotone in each value as long as the gap keeps its sign).
    """
    r, e, c = (np.asarray(a, dtype=np.float64) for a in (routed, edge, cloud))
    lo_total = hi_total = 0.0
    offsets = (-half_ulp, half_ulp)
    for ri, ei, ci in zip(r, e, c):
        terms = []
        for dr in offsets:
            for de in offsets:
                for dc in offsets:
                    gap = abs((ci + dc) - (ei + de))
                    if gap == 0:
                        continue
                    terms.append(((ri + dr) - (ei + de)) / gap)
        lo_total += min(terms)
        hi_total += max(terms)
    n = len(r)
    return lo_total / n, hi_total / n
