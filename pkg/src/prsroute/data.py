"""Prompt records: file format, labels, a synthetic corpus and splits.

Dataset files are line-delimited JSON. The first line is a header::

    {"schema_version": 1, "metrics": ["definition", ...], "vocab_size": 512}

and each following line is one record::

    {"id": "r000001", "tokens": [3, 17, 4], "q_edge": [...], "q_cloud": [...],
     "sims_edge": [[pos, neg], ...], "sims_cloud": [[pos, neg], ...]}

``sims_*`` are optional raw similarity pairs; when a record carries only
those, qualities are derived from them.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import quality
from .errors import DataError, DimensionError, ParseError
from .quality import DistanceParams, SimilarityPair

SCHEMA_VERSION = 1
QUALITY_CLAMP = 1e-4


@dataclass(frozen=True)
class PromptRecord:
    id: str
    tokens: tuple[int, ...]
    q_edge: np.ndarray = field(repr=False)
    q_cloud: np.ndarray = field(repr=False)
    sims_edge: tuple[tuple[float, float], ...] | None = field(default=None, repr=False)
    sims_cloud: tuple[tuple[float, float], ...] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {"id": self.id, "tokens": list(self.tokens),
               "q_edge": self.q_edge.tolist(), "q_cloud": self.q_cloud.tolist()}
        if self.sims_edge is not None:
            out["sims_edge"] = [list(p) for p in self.sims_edge]
        if self.sims_cloud is not None:
            out["sims_cloud"] = [list(p) for p in self.sims_cloud]
        return out


@dataclass
class Dataset:
    metric_names: list[str]
    records: list[PromptRecord]
    vocab_size: int | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_metrics(self) -> int:
        return len(self.metric_names)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def token_lists(self) -> list[tuple[int, ...]]:
        return [r.tokens for r in self.records]

    def q_edge(self) -> np.ndarray:
        return np.array([r.q_edge for r in self.records]).reshape(len(self), self.n_metrics)

    def q_cloud(self) -> np.ndarray:
        return np.array([r.q_cloud for r in self.records]).reshape(len(self), self.n_metrics)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.metric_names, [self.records[i] for i in indices], self.vocab_size)


@dataclass(frozen=True)
class PRSLabel:
    distances: np.ndarray
    prs: float


# --------------------------------------------------------------------------- file format

def _header(dataset: Dataset) -> dict:
    head = {"schema_version": SCHEMA_VERSION, "metrics": list(dataset.metric_names)}
    if dataset.vocab_size is not None:
        head["vocab_size"] = int(dataset.vocab_size)
    return head


def export(dataset: Dataset, path: str | Path):
    lines = [json.dumps(_header(dataset))]
    lines.extend(json.dumps(r.to_dict()) for r in dataset.records)
    Path(path).write_text("\n".join(lines) + "\n")


def _sims(raw, n, lineno, key):
    if not isinstance(raw, list) or len(raw) != n:
        raise ParseError(f"{key} must list {n} [positive, negative] pairs", lineno)
    try:
        pairs = tuple((float(p), float(q)) for p, q in raw)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{key}: {exc}", lineno) from exc
    return pairs


def _qualities_from_sims(pairs) -> np.ndarray:
    return quality.quality_vector([SimilarityPair(p, q) for p, q in pairs])


def _parse_record(obj, n: int, vocab_size: int | None, lineno: int) -> PromptRecord:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", lineno)
    for key in ("id", "tokens"):
        if key not in obj:
            raise ParseError(f"missing field {key!r}", lineno)
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise ParseError("id must be a non-empty string", lineno)
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool)
                                               for t in tokens):
        raise ParseError("tokens must be a list of integers", lineno)
    if not tokens:
        raise ParseError("empty sequence", lineno)
    if vocab_size is not None and any(t < 0 or t >= vocab_size for t in tokens):
        raise ParseError(f"token id outside vocabulary of size {vocab_size}", lineno)

    sims = {}
    for side in ("edge", "cloud"):
        key = f"sims_{side}"
        if key in obj:
            sims[side] = _sims(obj[key], n, lineno, key)

    q = {}
    for side in ("edge", "cloud"):
        key = f"q_{side}"
        if key in obj:
            try:
                vec = np.array(obj[key], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{key}: {exc}", lineno) from exc
            if vec.shape != (n,):
                raise ParseError(f"{key} must have {n} entries", lineno)
            if not np.all((vec > 0) & (vec < 1)):
                raise ParseError(f"{key} entries must lie in (0, 1)", lineno)
            q[side] = vec
            if side in sims:
                derived = _qualities_from_sims(sims[side])
                gap = float(np.max(np.abs(derived - vec)))
                if gap > 1e-9:
                    warnings.warn(f"line {lineno}: {key} differs from qualities derived "
                                  f"from {key.replace('q_', 'sims_')} by {gap:.3g}; "
                                  f"using explicit values", stacklevel=3)
        elif side in sims:
            q[side] = _qualities_from_sims(sims[side])
        else:
            raise ParseError(f"missing field {key!r} (and no sims_{side})", lineno)
    return PromptRecord(rid, tuple(tokens), q["edge"], q["cloud"],
                        sims.get("edge"), sims.get("cloud"))


def ingest(path: str | Path) -> Dataset:
    """Parse a dataset file. An empty file yields an empty dataset."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return Dataset([], [])
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", 1) from exc
    if not isinstance(head, dict) or head.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"header must carry schema_version {SCHEMA_VERSION}", 1)
    names = head.get("metrics")
    if not isinstance(names, list) or not names:
        raise ParseError("header must list metric names", 1)
    vocab_size = head.get("vocab_size")
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
        rec = _parse_record(obj, len(names), vocab_size, lineno)
        if rec.id in seen:
            raise DataError(f"line {lineno}: duplicate record id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return Dataset(list(names), records, vocab_size)


# --------------------------------------------------------------------------- labels

def fit_distance_params(train: Dataset, gamma: float = quality.DEFAULT_GAMMA,
                        denom_floor: float = quality.DEFAULT_DENOM_FLOOR) -> DistanceParams:
    """Per-metric set means over the training split, frozen for all splits."""
    if len(train) == 0:
        raise DataError("cannot fit label parameters on an empty dataset")
    return DistanceParams(gamma, denom_floor, train.q_edge().mean(axis=0),
                          train.q_cloud().mean(axis=0))


def build_labels(dataset: Dataset, params: DistanceParams, weights) -> list[PRSLabel]:
    if dataset.n_metrics and dataset.n_metrics != params.n_metrics:
        raise DimensionError("dataset and label parameters disagree on metric count")
    if len(dataset) == 0:
        return []
    qe, qc = dataset.q_edge(), dataset.q_cloud()
    dist = quality.distances(qe, qc, params)
    scores = quality.prs(qe, qc, weights, params)
    return [PRSLabel(d, float(s)) for d, s in zip(dist, np.atleast_1d(scores))]


@dataclass
class LabelSet:
    """Distance parameters plus labels for any number of named splits."""

    params: DistanceParams
    weights: np.ndarray
    metric_names: list[str]
    labels: dict[str, dict[str, PRSLabel]]

    def distances(self, split: str, ids: Sequence[str]) -> np.ndarray:
        table = self.labels[split]
        return np.array([table[i].distances for i in ids])

    def prs(self, split: str, ids: Sequence[str]) -> np.ndarray:
        table = self.labels[split]
        return np.array([table[i].prs for i in ids])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metrics": list(self.metric_names),
            "weights": self.weights.tolist(),
            "params": self.params.to_dict(),
            "labels": {
                split: [{"id": rid, "distances": lab.distances.tolist(), "prs": lab.prs}
                        for rid, lab in table.items()]
                for split, table in self.labels.items()
            },
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LabelSet":
        try:
            doc = json.loads(Path(path).read_text())
            labels = {
                split: {row["id"]: PRSLabel(np.array(row["distances"], dtype=np.float64),
                                            float(row["prs"])) for row in rows}
                for split, rows in doc["labels"].items()
            }
            return cls(DistanceParams.from_dict(doc["params"]),
                       np.array(doc["weights"], dtype=np.float64), list(doc["metrics"]), labels)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed label file {path}: {exc}") from exc


def label_splits(splits: dict[str, Dataset], weights, gamma: float = quality.DEFAULT_GAMMA,
                 denom_floor: float = quality.DEFAULT_DENOM_FLOOR,
                 train_split: str = "train") -> LabelSet:
    params = fit_distance_params(splits[train_split], gamma, denom_floor)
    w = np.asarray(weights, dtype=np.float64)
    names = splits[train_split].metric_names
    labels = {
        name: dict(zip(ds.ids, build_labels(ds, params, w)))
        for name, ds in splits.items()
    }
    return LabelSet(params, w, list(names), labels)


# --------------------------------------------------------------------------- synthetic data

DEFAULT_EDGE_BASE = (0.64, 0.68, 0.62, 0.67, 0.60, 0.57, 0.48, 0.52, 0.49, 0.48)
DEFAULT_EDGE_SLOPE = (-0.03, -0.02, -0.04, -0.03, -0.01, -0.03, -0.04, -0.02, -0.04, -0.03)
DEFAULT_CLOUD_SLOPE = (0.03, 0.03, 0.03, 0.04, 0.02, 0.03, 0.04, 0.02, 0.04, 0.02)
# the two sides break even at difficulty 0.35, so the edge wins on easy prompts
# while the cloud side leads every metric on average (mean difficulty is 1/2)
DEFAULT_CLOUD_OFFSET = tuple(round(-0.35 * (c - e), 6)
                             for c, e in zip(DEFAULT_CLOUD_SLOPE, DEFAULT_EDGE_SLOPE))
DEFAULT_METRIC_NAMES = ("definition", "detail", "clarity", "sharpness", "harmony",
                        "realism", "color", "consistency", "layout", "integrity")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a learnable stand-in corpus.

    A record's latent difficulty is the fraction of its tokens drawn from
    the difficulty sub-vocabulary (the lowest ``difficulty_fraction`` of
    ids). Per metric, ``q = base + slope * difficulty + noise`` on each
    side; cloud slopes exceed edge slopes so harder prompts favour cloud.
    """

    n_records: int = 28_000
    vocab_size: int = 512
    difficulty_fraction: float = 0.25
    min_len: int = 4
    max_len: int = 20
    noise_scale: float = 0.02
    edge_base: tuple[float, ...] = DEFAULT_EDGE_BASE
    cloud_offset: tuple[float, ...] = DEFAULT_CLOUD_OFFSET
    edge_slope: tuple[float, ...] = DEFAULT_EDGE_SLOPE
    cloud_slope: tuple[float, ...] = DEFAULT_CLOUD_SLOPE
    metric_names: tuple[str, ...] = DEFAULT_METRIC_NAMES
    seed: int = 0

    def __post_init__(self):
        n = len(self.metric_names)
        for name in ("edge_base", "cloud_offset", "edge_slope", "cloud_slope"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"{name} needs {n} entries")
        if any(c <= e for c, e in zip(self.cloud_slope, self.edge_slope)):
            raise DataError("cloud slopes must exceed edge slopes")
        if not 0 < self.difficulty_fraction < 1:
            raise DataError("difficulty_fraction must be in (0, 1)")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if self.vocab_size < 2:
            raise DataError("vocab_size must be >= 2")


def n_difficulty_tokens(spec: SyntheticSpec) -> int:
    return max(1, min(spec.vocab_size - 1, round(spec.difficulty_fraction * spec.vocab_size)))


def difficulty(tokens: Sequence[int], spec: SyntheticSpec) -> float:
    cut = n_difficulty_tokens(spec)
    return sum(1 for t in tokens if t < cut) / len(tokens)


def synthetic_qualities(diff, spec: SyntheticSpec, noise_edge=0.0, noise_cloud=0.0):
    """Noise-free (or given-noise) qualities for an array of difficulties."""
    diff = np.asarray(diff, dtype=np.float64)[..., None]
    base_e = np.asarray(spec.edge_base)
    base_c = base_e + np.asarray(spec.cloud_offset)
    qe = base_e + np.asarray(spec.edge_slope) * diff + noise_edge
    qc = base_c + np.asarray(spec.cloud_slope) * diff + noise_cloud
    lo, hi = QUALITY_CLAMP, 1.0 - QUALITY_CLAMP
    return np.clip(qe, lo, hi), np.clip(qc, lo, hi)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    cut = n_difficulty_tokens(spec)
    n = len(spec.metric_names)
    width = len(str(max(spec.n_records - 1, 1)))
    records = []
    for i in range(spec.n_records):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        rate = rng.uniform()
        hard = rng.uniform(size=length) < rate
        tokens = np.where(hard, rng.integers(0, cut, size=length),
                          rng.integers(cut, spec.vocab_size, size=length))
        diff = float(hard.mean())
        qe, qc = synthetic_qualities(diff, spec,
                                     spec.noise_scale * rng.standard_normal(n),
                                     spec.noise_scale * rng.standard_normal(n))
        records.append(PromptRecord(f"r{i:0{width}d}", tuple(int(t) for t in tokens), qe, qc))
    return Dataset(list(spec.metric_names), records, spec.vocab_size)


def split(dataset: Dataset, fractions: Sequence[float] = (0.70, 0.15, 0.15), seed: int = 0,
          names: Sequence[str] = ("train", "calib", "eval")) -> dict[str, Dataset]:
    """Disjoint, exhaustive seeded split. The last split takes the remainder."""
    if len(fractions) != len(names):
        raise DataError("one fraction per split name")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must be non-negative and sum to 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    counts = [int(round(f * len(dataset))) for f in fractions[:-1]]
    if sum(counts) > len(dataset):
        raise DataError("split fractions overflow the dataset")
    out, start = {}, 0
    for name, count in zip(names[:-1], counts):
        out[name] = dataset.subset(sorted(order[start:start + count]))
        start += count
    out[names[-1]] = dataset.subset(sorted(order[start:]))
    return out


# --------------------------------------------------------------------------- tokenizer

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Whitespace/punctuation tokenizer over a vocabulary built from a corpus.

    Id 0 is reserved for unknown words. Any other tokenizer works too: the
    dataset format only sees integer ids.
    """

    UNK = "<unk>"

    def __init__(self, words: Sequence[str]):
        self.words = [self.UNK] + [w for w in words if w != self.UNK]
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @staticmethod
    def split(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in cls.split(text):
                counts[tok] = counts.get(tok, 0) + 1
        words = sorted((w for w, c in counts.items() if c >= min_count),
                       key=lambda w: (-counts[w], w))
        return cls(words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, 0) for tok in self.split(text)]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]
