"""Train a router on synthetic prompts and sweep the cloud share.

A small run (3k records, 3 epochs) that finishes in well under a minute. The
acceptance suite runs the full-size version through the CLI.
"""

import numpy as np

from prsroute.data import SyntheticSpec, generate_synthetic, label_splits, split
from prsroute.evaluation import REPORT_RATES, sweep
from prsroute.router import RouterConfig, train

ds = generate_synthetic(SyntheticSpec(n_records=3000, seed=3))
parts = split(ds, seed=3)
labels = label_splits(parts, np.full(10, 0.1))
train_set, calib, evals = parts["train"], parts["calib"], parts["eval"]
print({k: len(v) for k, v in parts.items()})
print("share of eval prompts the edge already wins:",
      np.mean(labels.prs("eval", evals.ids) >= 0.5).round(3))

config = RouterConfig(vocab_size=ds.vocab_size, epochs=3, learning_rate=1e-3)
ckpt = train(train_set.token_lists(), labels.distances("train", train_set.ids), config)
print("loss by epoch:", np.round(ckpt.meta["loss_history"], 5))

result = sweep(ckpt.predict_prs(calib.token_lists()), evals.ids,
               ckpt.predict_prs(evals.token_lists()), evals.q_edge(), evals.q_cloud(),
               labels.prs("eval", evals.ids), evals.metric_names, grid=REPORT_RATES)
print(" p    p_eff  win(router/random/oracle)   dP router  dP random")
for r in result.results:
    print(f"{r.p:.1f}  {r.p_effective:.3f}  {r.win_router:.3f} / {r.win_random:.3f} / "
          f"{r.win_oracle:.3f}      {r.delta_p:.3f}      {r.delta_p_random:.3f}")
for target in (0.5, 0.7):
    saving = result.cost_saving(target)
    print(f"cloud calls saved vs random at dP={target}:",
          "n/a" if saving is None else f"{saving:.1%}")
