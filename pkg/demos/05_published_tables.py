"""Recompute the relative improvement from published per-metric means.

The printed means carry four decimals. Where the edge and cloud means
differ by only a few units in that last place, rounding alone can move the
recomputed value by many points; the bounds show how far.
"""

from prsroute.reference import delta_p_bounds, load_reference_tables, reproduce_tables

doc = load_reference_tables()
tables = {t["name"]: t for t in doc["tables"]}
for row in reproduce_tables(doc):
    if row.router != "RouteT2I":
        continue
    t = tables[row.table]
    lo, hi = delta_p_bounds(t["routers"]["RouteT2I"]["means"], t["edge"], t["cloud"])
    print(f"{row.table:32s} recomputed {100 * row.delta_p:7.2f}  printed "
          f"{100 * row.reported:6.2f}  rounding range [{100 * lo:6.2f}, {100 * hi:6.2f}]  "
          f"smallest gap {row.min_gap:.4f}")
