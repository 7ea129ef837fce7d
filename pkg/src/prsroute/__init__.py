"""Edge/cloud text-to-image prompt routing.

A small router predicts, per quality metric, how an edge model's image for a
prompt compares with a cloud model's. The weighted combination (the
relative-superiority score, PRS) is thresholded so that at most a chosen
share of prompts goes to the cloud.
"""

from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     InvalidInputError, ParseError, PRSRouteError)
from .quality import (DistanceParams, MetricSet, ScaleSpaceSpec, SimilarityPair,
                      contrastive_quality, distances, load_metric_set, prs,
                      quality_distance, scale_ratio)
from .router import Checkpoint, RouterConfig, forward_batch, random_checkpoint, train
from .data import Dataset, LabelSet, PromptRecord, SyntheticSpec, generate_synthetic, ingest
from .strategy import (Budget, RoutingDecision, RoutingPolicy, budget_to_rate,
                       calibrate_threshold, route, route_many)
from .evaluation import evaluate_destinations, sweep

__version__ = "0.1.0"
