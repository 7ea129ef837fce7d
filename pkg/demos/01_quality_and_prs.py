"""From image/text similarities to a relative-superiority score.

Each quality metric is a pair of opposing descriptions ("Sharp" vs "Hazy").
An image's quality on that metric is the sigmoid of how much closer it sits
to the positive text than to the negative one.
"""

import numpy as np

from prsroute import quality
from prsroute.quality import DistanceParams, ScaleSpaceSpec, SimilarityPair

metrics = quality.load_metric_set()
for m in metrics.metrics[:3]:
    print(f"{m.name:12s} {m.positive_text!r} vs {m.negative_text!r}  weight {m.weight}")

# similarity of one image to the positive / negative text of each metric
rng = np.random.default_rng(0)
sims_edge = [SimilarityPair(*rng.uniform(0.20, 0.30, 2)) for _ in metrics.metrics]
sims_cloud = [SimilarityPair(p.sim_positive + 0.01, p.sim_negative) for p in sims_edge]
q_edge = quality.quality_vector(sims_edge)
q_cloud = quality.quality_vector(sims_cloud)
print("edge qualities ", q_edge.round(4))
print("cloud qualities", q_cloud.round(4))

# distances are scaled by how far apart the two models are on average
params = DistanceParams(gamma=1.0, denom_floor=1e-6,
                        mu_edge=np.full(10, 0.50), mu_cloud=np.full(10, 0.51))
d = quality.distances(q_edge, q_cloud, params)
print("per-metric distances", d.round(3))
score = quality.prs(q_edge, q_cloud, metrics, params)
print(f"PRS = {score:.4f}  (below 0.5: the cloud image is better)")

# identical images sit exactly at parity, and swapping the sides mirrors the score
print("PRS(x, x) =", quality.prs(q_edge, q_edge, metrics, params))
print("PRS(a, b) + PRS(b, a) =", score + quality.prs(q_cloud, q_edge, metrics, params))

# why route on text: the image space dwarfs the prompt space
ratio = quality.scale_ratio(ScaleSpaceSpec(vocab_size=49408, max_len=77, width=512,
                                           height=512, color_depth=24))
print(f"ln(|images| / |prompts|) = {ratio:.0f}")
