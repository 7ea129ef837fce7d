"""Command-line pipeline: gen-data, label, train, calibrate, route, evaluate,
sweep, reproduce-tables and serve.

A dataset directory holds ``train.jsonl``, ``calib.jsonl``, ``eval.jsonl``
and, after ``label``, ``labels.json``.

Exit codes: 0 success, 2 usage, 3 missing file, 4 bad input data,
5 configuration conflict, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, quality, reference, strategy
from .errors import ConfigError, DataError, ParseError, PRSRouteError
from .router import Checkpoint, RouterConfig, train

log = logging.getLogger("prsroute")

SPLITS = ("train", "calib", "eval")
LABELS_FILE = "labels.json"

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3, 4, 5


# --------------------------------------------------------------------------- helpers

def _split_path(directory: Path, split: str) -> Path:
    return directory / f"{split}.jsonl"


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _load_split(directory: Path, split: str) -> data.Dataset:
    return data.ingest(_require(_split_path(directory, split)))


def _load_labels(directory: Path) -> data.LabelSet:
    return data.LabelSet.load(_require(directory / LABELS_FILE))


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad {what}: {text!r}") from exc


def _load_requests(path: Path, split: str = "eval") -> tuple[list[str], list[list[int]]]:
    """ids and token lists from a dataset dir, a dataset file or a request file."""
    if path.is_dir():
        ds = _load_split(path, split)
        return ds.ids, [list(t) for t in ds.token_lists()]
    lines = _require(path).read_text().splitlines()
    if not lines:
        return [], []
    first = json.loads(lines[0]) if lines[0].strip() else {}
    if isinstance(first, dict) and "schema_version" in first:
        ds = data.ingest(path)
        return ds.ids, [list(t) for t in ds.token_lists()]
    ids, tokens = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ids.append(str(obj["id"]))
            tokens.append(list(obj["tokens"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad request line: {exc}", lineno) from exc
    return ids, tokens


def _load_checkpoint_and_policy(args) -> tuple[Checkpoint, strategy.RoutingPolicy]:
    ckpt_path = _require(Path(args.checkpoint))
    policy = strategy.RoutingPolicy.load(_require(Path(args.policy)))
    if policy.checkpoint_sha256 and policy.checkpoint_sha256 != strategy.file_sha256(ckpt_path):
        raise ConfigError("policy was calibrated for a different checkpoint")
    return Checkpoint.load(ckpt_path), policy


def _write(path: str | None, text: str):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _true_values(directory: Path, split: str = "eval"):
    ds = _load_split(directory, split)
    labels = _load_labels(directory)
    if split not in labels.labels:
        raise DataError(f"labels.json has no {split!r} split")
    return ds, labels, labels.prs(split, ds.ids)


def _result_json(r: evaluation.RateResult) -> dict:
    return {"p": r.p, "p_effective": r.p_effective, "alpha": r.alpha,
            "win_router": r.win_router, "win_random": r.win_random,
            "win_oracle": r.win_oracle, "delta_w": r.delta_w, "delta_p": r.delta_p,
            "delta_p_random": r.delta_p_random, "delta_p_oracle": r.delta_p_oracle}


# --------------------------------------------------------------------------- commands

def cmd_gen_data(args):
    counts = (args.n_train, args.n_calib, args.n_eval)
    total = sum(counts)
    if total == 0 or min(counts) < 0:
        raise ConfigError("split sizes must be non-negative and not all zero")
    spec = data.SyntheticSpec(n_records=total, vocab_size=args.vocab_size,
                              noise_scale=args.noise, seed=args.seed)
    ds = data.generate_synthetic(spec)
    parts = data.split(ds, [c / total for c in counts], seed=args.seed, names=SPLITS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        data.export(parts[name], _split_path(out, name))
        log.info("wrote %d records to %s", len(parts[name]), _split_path(out, name))


def cmd_label(args):
    directory = Path(args.dataset)
    splits = {name: _load_split(directory, name) for name in SPLITS
              if _split_path(directory, name).exists()}
    if "train" not in splits:
        raise FileNotFoundError(f"no such file: {_split_path(directory, 'train')}")
    names = splits["train"].metric_names
    if args.metrics:
        metric_set = quality.load_metric_set(args.metrics)
        if metric_set.names != names:
            raise ConfigError("metric file names do not match the dataset header")
        weights = metric_set.weights
    elif args.weights:
        weights = np.array(_parse_floats(args.weights, "weights"))
        quality.MetricSet.uniform(names).with_weights(weights)   # validates
    else:
        weights = quality.MetricSet.uniform(names).weights
    labels = data.label_splits(splits, weights, args.gamma, args.denom_floor)
    out = Path(args.out) if args.out else directory / LABELS_FILE
    labels.save(out)
    log.info("wrote labels for %s to %s", ", ".join(splits), out)


def _router_config(args, vocab_size: int, weights) -> RouterConfig:
    return RouterConfig(
        vocab_size=vocab_size, d=args.d, n_metrics=len(weights), K=args.top_k, l=args.rank,
        n_max=args.n_max, layers=args.layers, attn_heads=args.heads, gamma=args.gamma,
        weights=tuple(float(w) for w in weights), learning_rate=args.lr,
        weight_decay=args.weight_decay, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed)


def cmd_train(args):
    directory = Path(args.dataset)
    ds = _load_split(directory, "train")
    labels = _load_labels(directory)
    if ds.vocab_size is None and args.vocab_size is None:
        raise ConfigError("dataset header has no vocab_size; pass --vocab-size")
    vocab = args.vocab_size or ds.vocab_size
    config = _router_config(args, vocab, labels.weights)
    log.info("router config %s", json.dumps(config.to_dict(), sort_keys=True))
    ckpt = train(ds.token_lists(), labels.distances("train", ds.ids), config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out)


def cmd_calibrate(args):
    budget_flags = [args.budget_fee, args.budget_latency_cloud, args.budget_latency_edge,
                    args.budget_latency_router, args.budget_latency_total]
    has_budget = any(v is not None for v in budget_flags)
    if args.rate is not None and has_budget:
        raise ConfigError("give either --rate or budget flags, not both")
    if args.rate is not None:
        rho = args.rate
        if not 0.0 <= rho <= 1.0:
            raise ConfigError("--rate must lie in [0, 1]")
    elif has_budget:
        rho = strategy.budget_to_rate(strategy.Budget(
            cloud_cost=args.cloud_cost,
            fee_budget=args.budget_fee if args.budget_fee is not None else float("inf"),
            time_budget=(args.budget_latency_total if args.budget_latency_total is not None
                         else float("inf")),
            cloud_latency=args.budget_latency_cloud or 0.0,
            edge_latency=args.budget_latency_edge or 0.0,
            router_latency=args.budget_latency_router or 0.0))
    else:
        raise ConfigError("calibration needs --rate or budget flags")
    ckpt_path = _require(Path(args.checkpoint))
    ckpt = Checkpoint.load(ckpt_path)
    _, tokens = _load_requests(Path(args.dataset), split="calib")
    alpha = strategy.calibrate_threshold(ckpt.predict_prs(tokens), rho)
    policy = strategy.RoutingPolicy(alpha, rho, ckpt_path.name, strategy.file_sha256(ckpt_path))
    policy.save(args.out)
    log.info("rho %.6f -> alpha %.6f", rho, alpha)


def cmd_route(args):
    ckpt, policy = _load_checkpoint_and_policy(args)
    ids, tokens = _load_requests(Path(args.dataset), split="eval")
    decisions = strategy.route_many(ids, tokens, ckpt, policy)
    _write(args.out, "".join(d.to_line() + "\n" for d in decisions))


def _read_decisions(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(_require(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out[obj["id"]] = obj["route"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad decision line: {exc}", lineno) from exc
    return out


def cmd_evaluate(args):
    directory = Path(args.dataset)
    ds, labels, true_prs = _true_values(directory)
    alpha = None
    if args.decisions:
        table = _read_decisions(Path(args.decisions))
        missing = [i for i in ds.ids if i not in table]
        if missing:
            raise DataError(f"no decision for record {missing[0]!r}")
        dest = [table[i] for i in ds.ids]
    elif args.checkpoint and args.policy:
        ckpt, policy = _load_checkpoint_and_policy(args)
        alpha = policy.alpha
        dest = [d.destination for d in
                strategy.route_many(ds.ids, ds.token_lists(), ckpt, policy)]
    else:
        raise ConfigError("evaluate needs --decisions or both --checkpoint and --policy")
    result = evaluation.evaluate_destinations(ds.ids, ds.q_edge(), ds.q_cloud(), true_prs,
                                              dest, alpha=alpha,
                                              denom_floor=labels.params.denom_floor)
    _write(args.out, evaluation.summary_csv(result, ds.metric_names, ds.q_edge().mean(0),
                                            ds.q_cloud().mean(0)))
    print(json.dumps(_result_json(result)))


def cmd_sweep(args):
    directory = Path(args.dataset)
    ckpt = Checkpoint.load(_require(Path(args.checkpoint)))
    calib = _load_split(directory, "calib")
    ds, labels, true_prs = _true_values(directory)
    grid = _parse_floats(args.grid, "grid") if args.grid else evaluation.DEFAULT_GRID
    result = evaluation.sweep(ckpt.predict_prs(calib.token_lists()), ds.ids,
                              ckpt.predict_prs(ds.token_lists()), ds.q_edge(), ds.q_cloud(),
                              true_prs, ds.metric_names, grid, labels.params.denom_floor)
    _write(args.out, evaluation.sweep_csv(result))
    savings = {f"{t:.1f}": result.cost_saving(t, labels.params.denom_floor)
               for t in evaluation.REPORT_RATES}
    print(json.dumps({"rates": [_result_json(r) for r in result.results],
                      "cost_saving": savings}))


def cmd_reproduce_tables(args):
    rows = reference.reproduce_tables(reference.load_reference_tables(args.tables))
    lines = ["table,group,router,delta_p_pct,reported_pct,error_pp,min_gap"]
    for r in rows:
        reported = "NA" if r.reported is None else f"{100 * r.reported:.2f}"
        err = "NA" if r.error_pp is None else f"{r.error_pp:+.2f}"
        lines.append(f"{r.table},{r.group},{r.router},{100 * r.delta_p:.2f},{reported},"
                     f"{err},{r.min_gap:.4f}")
    _write(args.out, "\n".join(lines) + "\n")


def cmd_serve(args):
    from .service import serve

    ckpt, policy = _load_checkpoint_and_policy(args)
    serve(args.bind, ckpt, policy, hard_admission=args.hard_admission)


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prsroute",
        description="Edge/cloud prompt routing on predicted relative superiority. "
                    "Set PRSR_LOG=DEBUG|INFO|WARNING for verbosity.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a seeded synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="generator and split seed")
    p.add_argument("--n-train", type=int, default=20_000, help="training records")
    p.add_argument("--n-calib", type=int, default=4_000, help="calibration records")
    p.add_argument("--n-eval", type=int, default=4_000, help="evaluation records")
    p.add_argument("--vocab-size", type=int, default=512, help="token vocabulary size")
    p.add_argument("--noise", type=float, default=0.02, help="per-metric quality noise scale")

    p = add("label", cmd_label, "compute quality-distance and PRS labels for every split")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--gamma", type=float, default=quality.DEFAULT_GAMMA,
                   help="distance temperature")
    p.add_argument("--weights", help="comma-separated metric weights (default uniform)")
    p.add_argument("--metrics", help="metric file whose weights to use")
    p.add_argument("--denom-floor", type=float, default=quality.DEFAULT_DENOM_FLOOR,
                   help="floor on the edge/cloud mean gap")
    p.add_argument("--out", help="label file (default DATASET/labels.json)")

    p = add("train", cmd_train, "train the router on the training split")
    p.add_argument("--dataset", required=True, help="labelled dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffle seed")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--lr", type=float, default=2e-5, help="Adam learning rate")
    p.add_argument("--weight-decay", type=float, default=0.0, help="Adam weight decay")
    p.add_argument("--batch-size", type=int, default=16, help="records per step")
    p.add_argument("--d", type=int, default=64, help="hidden width")
    p.add_argument("--layers", type=int, default=2, help="attention + MoE blocks")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--top-k", type=int, default=4, help="tokens selected per expert")
    p.add_argument("--rank", type=int, default=8, help="expert low-rank dimension")
    p.add_argument("--n-max", type=int, default=77, help="maximum tokens per prompt")
    p.add_argument("--gamma", type=float, default=quality.DEFAULT_GAMMA,
                   help="distance temperature recorded in the checkpoint")
    p.add_argument("--vocab-size", type=int, help="override the dataset vocabulary size")

    p = add("calibrate", cmd_calibrate, "choose the threshold alpha for a cloud-rate bound")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--dataset", required=True,
                   help="dataset directory (calib split) or record file")
    p.add_argument("--out", required=True, help="policy file to write")
    p.add_argument("--rate", type=float, help="cloud routing-rate bound rho")
    p.add_argument("--cloud-cost", type=float, default=1.0, help="fee of one cloud request")
    p.add_argument("--budget-fee", type=float, help="fee budget per request")
    p.add_argument("--budget-latency-cloud", type=float,
                   help="cloud latency incl. communication")
    p.add_argument("--budget-latency-edge", type=float, help="edge model latency")
    p.add_argument("--budget-latency-router", type=float, help="router latency")
    p.add_argument("--budget-latency-total", type=float, help="latency budget per request")

    p = add("route", cmd_route, "write one routing decision per record")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--policy", required=True, help="policy file from calibrate")
    p.add_argument("--dataset", required=True,
                   help="dataset directory (eval split), dataset file or request file")
    p.add_argument("--out", help="decision file (default stdout)")

    p = add("evaluate", cmd_evaluate, "score routing decisions on the eval split")
    p.add_argument("--dataset", required=True, help="labelled dataset directory")
    p.add_argument("--decisions", help="decision file from route")
    p.add_argument("--checkpoint", help="checkpoint (instead of --decisions)")
    p.add_argument("--policy", help="policy (instead of --decisions)")
    p.add_argument("--out", help="summary CSV (default stdout)")

    p = add("sweep", cmd_sweep, "recalibrate and evaluate across routing rates")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--dataset", required=True, help="labelled dataset directory")
    p.add_argument("--grid", help="comma-separated routing rates (default 0,0.1,...,1)")
    p.add_argument("--out", help="sweep CSV (default stdout)")

    p = add("reproduce-tables", cmd_reproduce_tables,
            "recompute dP from published per-metric mean tables")
    p.add_argument("--tables", help="table fixture (default: the shipped one)")
    p.add_argument("--out", help="CSV output (default stdout)")

    p = add("serve", cmd_serve, "run the line-delimited routing daemon")
    p.add_argument("--bind", default="127.0.0.1:7878", help="HOST:PORT to listen on")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--policy", required=True, help="policy file")
    p.add_argument("--hard-admission", action="store_true",
                   help="demote cloud decisions that would exceed the rate bound")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PRSR_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.info("resolved config %s", json.dumps(resolved, sort_keys=True))
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PRSRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
