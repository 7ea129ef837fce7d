import numpy as np
import pytest

from oracles import gate_oracle, moe_oracle
from prsroute import autodiff as ad
from prsroute.autodiff import Tensor
from prsroute.errors import ConfigError, DataError, InvalidInputError, ParseError
from prsroute.router import (Checkpoint, RouterConfig, combine_prs, dual_gate_moe_layer,
                             forward_batch, init_params, loss, mse_loss, random_checkpoint,
                             token_selection_gate, topk_mask, train)


def random_moe(rng, n, k, d=6, l=2, h=5):
    T = rng.normal(size=(n, d))
    e_pos, e_neg = rng.normal(size=(k, d)), rng.normal(size=(k, d))
    experts = [(rng.normal(size=(d, l)), rng.normal(size=(d, l)), rng.normal(size=(l, h)))
               for _ in range(k)]
    return T, e_pos, e_neg, experts


def small_config(**kw):
    base = dict(vocab_size=20, d=8, n_metrics=3, K=2, l=2, layers=2, attn_heads=2,
                batch_size=4, epochs=2, learning_rate=1e-2)
    base.update(kw)
    return RouterConfig(**base)


def test_gate_selects_everything_when_K_covers_n():
    rng = np.random.default_rng(0)
    g = token_selection_gate(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), K=7)
    assert np.all(g.mask == 1.0)


def test_gate_hand_set_dominant_token():
    # token 2 dominates expert 1
    T = np.array([[1.0, 0.0], [0.5, 0.0], [0.0, 3.0]])
    E = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = token_selection_gate(T, E, K=1)
    assert g.selected[1][0] == 2
    assert g.mask[:, 1].tolist() == [0.0, 0.0, 1.0]


def test_gate_matches_argsort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T, E = rng.normal(size=(8, 4)), rng.normal(size=(5, 4))
        K = int(rng.integers(1, 9))
        g = token_selection_gate(T, E, K)
        A, selected = gate_oracle(T, E, K)
        np.testing.assert_allclose(g.affinity, A, atol=1e-14)
        for i in range(5):
            assert list(g.selected[i]) == selected[i]
            assert sorted(np.flatnonzero(g.mask[:, i])) == sorted(selected[i])
        assert np.all(g.mask.sum(axis=0) == min(K, 8))


def test_topk_ties_go_to_lower_index():
    A = np.array([[0.5], [0.5], [0.5]])
    assert topk_mask(A, 2)[:, 0].tolist() == [1.0, 1.0, 0.0]


def test_gate_rejects_empty_sequence():
    with pytest.raises(InvalidInputError):
        token_selection_gate(np.zeros((0, 3)), np.zeros((2, 3)), 1)


def test_moe_matches_brute_force_loop():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        n, k = int(rng.integers(1, 11)), int(rng.integers(1, 7))
        K = int(rng.integers(1, n + 2))
        T, ep, en, experts = random_moe(rng, n, k)
        got = dual_gate_moe_layer(T, (ep, en), experts, K)
        worst = max(worst, float(np.max(np.abs(got - moe_oracle(T, ep, en, experts, K)))))
    assert worst <= 1e-12


def test_moe_single_expert_closed_form():
    rng = np.random.default_rng(3)
    T, ep, en, experts = random_moe(rng, 4, 1)
    P1, P2, S = experts[0]
    expected = 1.0 / (1.0 + np.exp(-(T @ P1 @ S - T @ P2 @ S)))
    np.testing.assert_allclose(dual_gate_moe_layer(T, (ep, en), experts, 4), expected, atol=1e-14)


def test_moe_tied_sides_give_half():
    rng = np.random.default_rng(4)
    T, ep, _, experts = random_moe(rng, 5, 3)
    tied = [(P, P, S) for P, _, S in experts]
    assert np.all(dual_gate_moe_layer(T, (ep, ep), tied, 2) == 0.5)


def test_moe_swap_antisymmetry():
    rng = np.random.default_rng(5)
    for _ in range(20):
        T, ep, en, experts = random_moe(rng, 6, 4)
        a = dual_gate_moe_layer(T, (ep, en), experts, 3)
        swapped = [(Pn, Pp, S) for Pp, Pn, S in experts]
        b = dual_gate_moe_layer(T, (en, ep), swapped, 3)
        np.testing.assert_allclose(a + b, 1.0, atol=1e-15)


def test_moe_expert_permutation_invariance():
    rng = np.random.default_rng(6)
    for _ in range(20):
        T, ep, en, experts = random_moe(rng, 7, 5)
        perm = rng.permutation(5)
        a = dual_gate_moe_layer(T, (ep, en), experts, 3)
        b = dual_gate_moe_layer(T, (ep[perm], en[perm]), [experts[i] for i in perm], 3)
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_lambda_rows_sum_to_one_for_selected_tokens():
    rng = np.random.default_rng(7)
    T, E = rng.normal(size=(9, 4)), rng.normal(size=(3, 4))
    g = token_selection_gate(T, E, 2)
    lam = ad.masked_normalize(Tensor(g.affinity), g.mask).data
    rows = g.mask.sum(axis=1) > 0
    np.testing.assert_allclose(lam[rows].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(lam[~rows] == 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        RouterConfig(vocab_size=10, d=8, l=5)
    with pytest.raises(ConfigError):
        RouterConfig(vocab_size=10, K=100, n_max=10)
    with pytest.raises(ConfigError):
        RouterConfig(vocab_size=10, d=10, attn_heads=4, l=2)
    with pytest.raises(ConfigError):
        RouterConfig.from_dict({"vocab_size": 10, "bogus": 1})
    cfg = small_config()
    assert cfg.k == 3 and RouterConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_range_and_determinism():
    ck = random_checkpoint(small_config())
    seqs = [[1, 2, 3], [4], [5, 6, 7, 8, 9]]
    a, b = ck.predict(seqs), ck.predict(seqs)
    assert a.shape == (3, 3)
    assert np.all((a > 0) & (a < 1))
    assert a.tobytes() == b.tobytes()
    prs = ck.predict_prs(seqs)
    assert np.all((prs > 0) & (prs < 1))


def test_batched_forward_equals_one_at_a_time():
    cfg = small_config()
    params = {n: Tensor(a) for n, a in init_params(cfg, np.random.default_rng(0)).items()}
    seqs = [[1, 2, 3, 4], [5, 6], [7, 8, 9, 10, 11, 12]]
    batched = forward_batch(params, cfg, seqs).data
    single = np.vstack([forward_batch(params, cfg, [s]).data for s in seqs])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_zeroed_heads_give_half():
    cfg = small_config()
    params = init_params(cfg, np.random.default_rng(0))
    params["head_w"][:] = 0.0
    ck = Checkpoint(cfg, params)
    assert ck.predict_prs([[1, 2]])[0] == 0.5


def test_forward_input_errors():
    ck = random_checkpoint(small_config(n_max=5))
    with pytest.raises(InvalidInputError, match="empty"):
        ck.predict([[]])
    with pytest.raises(InvalidInputError, match="unknown token id 99"):
        ck.predict([[1, 99]])
    with pytest.raises(InvalidInputError):
        ck.predict([[1] * 6])


def test_loss_examples():
    D = np.array([[0.2, 0.5, 0.9]])
    assert loss(D, D) == 0.0
    assert loss(D + 0.1, D) == pytest.approx(0.01, abs=1e-15)
    rng = np.random.default_rng(8)
    p, t = rng.uniform(size=(4, 3)), rng.uniform(size=(4, 3))
    expected = sum((p[r, i] - t[r, i]) ** 2 for r in range(4) for i in range(3)) / 12
    assert loss(p, t) == pytest.approx(expected, abs=1e-15)
    assert mse_loss(Tensor(p), t).item() == pytest.approx(expected, abs=1e-15)
    with pytest.raises(DataError):
        loss(p, t[:, :2])


def test_combine_prs_centred():
    assert combine_prs(np.full(10, 0.5), np.full(10, 0.1)) == 0.5
    assert combine_prs(np.array([0.2, 0.8]), [0.25, 0.75]) == pytest.approx(0.65, abs=1e-15)


def test_full_router_gradient_check():
    cfg = RouterConfig(vocab_size=12, d=8, n_metrics=3, K=2, l=2, layers=2, attn_heads=2)
    rng = np.random.default_rng(9)
    params = {n: Tensor(a, requires_grad=True) for n, a in init_params(cfg, rng).items()}
    tokens = [[3, 7, 1, 9]]
    targets = rng.uniform(0.1, 0.9, (1, 3))

    def f():
        return mse_loss(forward_batch(params, cfg, tokens), targets)

    def sig():
        trace = []
        with ad.no_grad():
            forward_batch(params, cfg, tokens, trace)
        return tuple(m.tobytes() for m in trace)

    skipped = []
    assert ad.finite_diff_check(f, params.values(), signature=sig, skipped=skipped) < 1e-4


def test_checkpoint_round_trip_bytes(tmp_path):
    ck = train([[1, 2, 3], [4, 5], [6, 7, 8, 9]], np.full((3, 3), 0.4), small_config())
    path = tmp_path / "c.bin"
    ck.save(path)
    again = Checkpoint.load(path)
    assert again.to_bytes() == ck.to_bytes()
    assert again.meta["loss_history"] == ck.meta["loss_history"]
    for name in ck.params:
        assert again.params[name].tobytes() == ck.params[name].tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b[:8] + (99).to_bytes(4, "little") + b[12:],
])
def test_checkpoint_corruption_detected(mutate):
    blob = random_checkpoint(small_config()).to_bytes()
    with pytest.raises(ParseError):
        Checkpoint.from_bytes(mutate(blob))


def test_checkpoint_is_immutable():
    ck = random_checkpoint(small_config())
    with pytest.raises(ValueError):
        ck.params["head_w"][0, 0] = 1.0


def test_training_is_deterministic_and_learns():
    rng = np.random.default_rng(10)
    seqs = [list(rng.integers(0, 20, rng.integers(2, 6))) for _ in range(40)]
    # target depends on whether token 0..4 appears
    targets = np.array([[0.8 if min(s) < 5 else 0.2] * 3 for s in seqs])
    cfg = small_config(epochs=8)
    a, b = train(seqs, targets, cfg), train(seqs, targets, cfg)
    assert a.to_bytes() == b.to_bytes()
    hist = a.meta["loss_history"]
    assert len(hist) == 8
    # smoothed trend goes down
    assert np.mean(hist[-3:]) < np.mean(hist[:3])


def test_train_errors():
    with pytest.raises(InvalidInputError):
        train([], np.zeros((0, 3)), small_config())
    with pytest.raises(DataError):
        train([[1]], np.zeros((1, 2)), small_config())
