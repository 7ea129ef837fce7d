"""Acceptance suite: one PASS/FAIL line per primary criterion.

The lines are collected by the ``report`` fixture (tests/conftest.py) and
printed in an "acceptance criteria" section at the end of the run. Run alone with ``pytest tests/test_acceptance.py -v``.
The end-to-end criterion trains the default router on 20k records and takes
roughly five minutes on one core.
"""

import json
import socket
import sys
import threading
import time

import numpy as np
import pytest

from oracles import exhaustive_best_wins, moe_oracle, win_count
from prsroute import autodiff as ad
from prsroute import quality
from prsroute.autodiff import Tensor
from prsroute.cli import main
from prsroute.data import LabelSet, ingest
from prsroute.evaluation import CLOUD, oracle_route, routed_count
from prsroute.quality import DistanceParams, ScaleSpaceSpec, scale_ratio
from prsroute.reference import reproduce_tables
from prsroute.router import (Checkpoint, RouterConfig, dual_gate_moe_layer, forward_batch,
                             init_params, mse_loss)
from prsroute.service import RoutingServer, ServiceState
from prsroute.strategy import RoutingPolicy, calibrate_threshold


# --------------------------------------------------------------------------- fixtures

def run(argv):
    code = main(argv)
    assert code == 0, argv


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Default pipeline at full size: 20k / 4k / 4k synthetic records, seed 0."""
    root = tmp_path_factory.mktemp("e2e")
    ds = root / "ds"
    start = time.perf_counter()
    run(["gen-data", "--out", str(ds), "--seed", "0"])
    run(["label", "--dataset", str(ds)])
    run(["train", "--dataset", str(ds), "--out", str(root / "ck.bin")])
    run(["calibrate", "--checkpoint", str(root / "ck.bin"), "--dataset", str(ds),
         "--rate", "0.5", "--out", str(root / "policy.json")])
    run(["route", "--checkpoint", str(root / "ck.bin"), "--policy", str(root / "policy.json"),
         "--dataset", str(ds), "--out", str(root / "decisions.jsonl")])
    elapsed = time.perf_counter() - start
    return root, elapsed


# --------------------------------------------------------------------------- criteria

def test_table_arithmetic_reproduction(report):
    start = time.perf_counter()
    rows = reproduce_tables()
    elapsed = time.perf_counter() - start
    ours = [r for r in rows if r.router == "RouteT2I"]
    headline = next(r for r in ours if r.group == "headline")
    appendix = [r for r in ours if r.group == "model_pair"]
    headline_ok = abs(100 * headline.delta_p - 83.97) <= 0.5
    misses = [f"{r.table} {r.error_pp:+.2f}pp (min gap {r.min_gap:.4f})"
              for r in appendix if abs(r.error_pp) > 1.0]
    ok = headline_ok and not misses and len(appendix) == 17 and elapsed < 1.0
    detail = (f"headline {100 * headline.delta_p:.2f}% vs 83.97% (+-0.5pp); "
              f"{len(appendix) - len(misses)}/{len(appendix)} appendix rows within +-1pp"
              f"{'; off: ' + '; '.join(misses) if misses else ''}; {elapsed * 1e3:.0f} ms")
    report("table arithmetic", ok, detail)


def test_scale_ratio_reproduction(report):
    a = scale_ratio(ScaleSpaceSpec(49408, 77, 512, 512, 24))
    b = scale_ratio(ScaleSpaceSpec(32128, 512, 512, 512, 24))
    ok = abs(a - 4360072) <= 10 and abs(b - 4355591) <= 10
    report("scale ratio", ok, f"{a:.2f} vs 4360072, {b:.2f} vs 4355591 (+-10)")


def test_gradient_correctness(report):
    start = time.perf_counter()
    cfg = RouterConfig(vocab_size=12, d=8, n_metrics=3, K=2, l=2, layers=2, attn_heads=2)
    rng = np.random.default_rng(0)
    params = {n: Tensor(a, requires_grad=True) for n, a in init_params(cfg, rng).items()}
    tokens = [[3, 7, 1, 9]]
    targets = rng.uniform(0.1, 0.9, (1, 3))

    def f():
        return mse_loss(forward_batch(params, cfg, tokens), targets)

    def selection():
        trace = []
        with ad.no_grad():
            forward_batch(params, cfg, tokens, trace)
        return tuple(m.tobytes() for m in trace)

    skipped = []
    err = ad.finite_diff_check(f, params.values(), h=1e-5, signature=selection, skipped=skipped)
    elapsed = time.perf_counter() - start
    n_coords = sum(p.data.size for p in params.values())
    ok = err < 1e-4 and elapsed < 30
    report("gradient check", ok, f"max rel err {err:.2e} over {n_coords - len(skipped)} "
                                 f"coords ({len(skipped)} selection flips skipped), "
                                 f"{elapsed:.1f} s")


def test_moe_oracle_equivalence(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        n, k = int(rng.integers(1, 11)), int(rng.integers(1, 7))
        d, l, h = 6, 2, 5
        K = int(rng.integers(1, n + 1))
        T = rng.normal(size=(n, d))
        ep, en = rng.normal(size=(k, d)), rng.normal(size=(k, d))
        experts = [(rng.normal(size=(d, l)), rng.normal(size=(d, l)), rng.normal(size=(l, h)))
                   for _ in range(k)]
        got = dual_gate_moe_layer(T, (ep, en), experts, K)
        worst = max(worst, float(np.max(np.abs(got - moe_oracle(T, ep, en, experts, K)))))
    elapsed = time.perf_counter() - start
    report("MoE oracle", worst <= 1e-12 and elapsed < 10,
           f"max abs diff {worst:.1e} on 200 instances, {elapsed:.2f} s")


def test_oracle_optimality(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(1, 13))
        prs = rng.uniform(0.2, 0.8, n).round(2)
        p = float(rng.uniform())
        dest = oracle_route(prs, [f"r{i}" for i in range(n)], p)
        m = routed_count(p, n)
        if dest.count(CLOUD) != m or win_count([x == CLOUD for x in dest], prs) != \
                exhaustive_best_wins(prs, m):
            bad += 1
    elapsed = time.perf_counter() - start
    report("oracle optimality", bad == 0 and elapsed < 20,
           f"{100 - bad}/100 trials match exhaustive search, {elapsed:.2f} s")


def test_prs_and_label_invariants(e2e, report):
    root, _ = e2e
    ms = quality.load_metric_set()
    rng = np.random.default_rng(3)
    params = DistanceParams(1.0, 1e-6, rng.uniform(0.4, 0.6, 10), rng.uniform(0.4, 0.6, 10))
    ident = all(quality.prs(x, x, ms, params) == 0.5 for x in rng.uniform(0.01, 0.99, (500, 10)))
    anti = max(abs(quality.prs(a, b, ms, params) + quality.prs(b, a, ms, params) - 1.0)
               for a, b in rng.uniform(0.01, 0.99, (500, 2, 10)))

    labels = LabelSet.load(root / "ds" / "labels.json")
    mismatched, total = 0, 0
    for split in ("train", "calib", "eval"):
        ds = ingest(root / "ds" / f"{split}.jsonl")
        for r in ds:
            lab = labels.labels[split][r.id]
            total += 1
            same = (lab.prs == quality.prs(r.q_edge, r.q_cloud, labels.weights, labels.params)
                    and np.array_equal(lab.distances,
                                       quality.distances(r.q_edge, r.q_cloud, labels.params)))
            mismatched += not same
    ok = ident and anti <= 1e-12 and mismatched == 0
    report("PRS/label invariants", ok,
           f"PRS(x,x)=0.5 exactly: {ident}; max antisymmetry error {anti:.1e}; "
           f"{total - mismatched}/{total} label records recompute exactly")


def test_calibration_guarantee(report):
    rng = np.random.default_rng(4)
    worst_excess, worst_alpha = -np.inf, -np.inf
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        # repeated values make ties likely
        preds = rng.choice(rng.uniform(0, 1, int(rng.integers(1, n + 1))), size=n)
        rho = float(rng.uniform())
        alpha = calibrate_threshold(preds, rho)
        worst_excess = max(worst_excess, float(np.mean(preds < alpha)) - rho)
        worst_alpha = max(worst_alpha, alpha)
    ok = worst_excess <= 0 and worst_alpha <= 0.5
    report("calibration guarantee", ok,
           f"max (cloud rate - rho) {worst_excess:+.4f}; max alpha {worst_alpha:.4f}")


def test_end_to_end_learning(e2e, capsys, report):
    root, elapsed = e2e
    code = main(["evaluate", "--dataset", str(root / "ds"), "--decisions",
                 str(root / "decisions.jsonl"), "--out", str(root / "summary.csv")])
    assert code == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    dw, dp, dp_rand = res["delta_w"], res["delta_p"], res["delta_p_random"]
    ok = (dw is not None and dw >= 0.10 and dp > max(dp_rand, 0.5) and elapsed < 15 * 60)
    report("end-to-end learning", ok,
           f"p_eff {res['p_effective']:.4f}: delta_w {dw:.3f} (>= 0.10), "
           f"dP {dp:.3f} vs random {dp_rand:.3f}; win router {res['win_router']:.3f} / "
           f"random {res['win_random']:.3f} / oracle {res['win_oracle']:.3f}; "
           f"pipeline {elapsed / 60:.1f} min")


def _pipeline(root):
    ds = root / "ds"
    run(["gen-data", "--out", str(ds), "--n-train", "2000", "--n-calib", "400",
         "--n-eval", "400", "--seed", "7"])
    run(["label", "--dataset", str(ds)])
    run(["train", "--dataset", str(ds), "--out", str(root / "ck.bin"), "--epochs", "2",
         "--seed", "7"])
    run(["calibrate", "--checkpoint", str(root / "ck.bin"), "--dataset", str(ds),
         "--rate", "0.5", "--out", str(root / "policy.json")])
    run(["route", "--checkpoint", str(root / "ck.bin"), "--policy", str(root / "policy.json"),
         "--dataset", str(ds), "--out", str(root / "decisions.jsonl")])
    run(["evaluate", "--dataset", str(ds), "--decisions", str(root / "decisions.jsonl"),
         "--out", str(root / "summary.csv")])
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_determinism(tmp_path, capsys, report):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differing = [k for k in a if a[k] != b.get(k)]
    ok = set(a) == set(b) and not differing
    report("determinism", ok, f"{len(a)} artifacts compared, "
                              f"{len(differing)} differ {differing if differing else ''}")


def test_offline_online_equivalence(e2e, tmp_path, report):
    root, _ = e2e
    lines = (root / "decisions.jsonl").read_text().splitlines()
    eval_ds = ingest(root / "ds" / "eval.jsonl")
    requests = [json.dumps({"id": r.id, "tokens": list(r.tokens)}) for r in eval_ds][:1000]
    (tmp_path / "requests.jsonl").write_text("\n".join(requests) + "\n")
    run(["route", "--checkpoint", str(root / "ck.bin"), "--policy", str(root / "policy.json"),
         "--dataset", str(tmp_path / "requests.jsonl"), "--out", str(tmp_path / "offline.jsonl")])
    offline = (tmp_path / "offline.jsonl").read_bytes()

    ckpt = Checkpoint.load(root / "ck.bin")
    policy = RoutingPolicy.load(root / "policy.json")
    srv = RoutingServer(("127.0.0.1", 0), ServiceState(ckpt, policy))
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        with socket.create_connection(("127.0.0.1", srv.port), timeout=30) as sock:
            f = sock.makefile("rwb")
            online = []
            for req in requests:
                f.write(req.encode() + b"\n")
                f.flush()
                online.append(f.readline())
    finally:
        srv.shutdown()
        srv.server_close()
    online = b"".join(online)
    same_prefix = offline == online and offline.decode().splitlines() == lines[:1000]
    report("offline/online equivalence", same_prefix and len(requests) == 1000,
           f"{len(requests)} requests, byte-identical: {offline == online}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
