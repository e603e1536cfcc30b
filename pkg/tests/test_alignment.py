import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muir.alignment import (
    NEW,
    AlignmentState,
    MuirConfig,
    commit_selection,
    init_soft_weights,
    propose_candidates,
    proportional_sample,
    run_muir,
    sample_probabilities,
    score_candidates,
    select_slots,
    subset_size,
)
from muir.bank import BankConfig, generate_var, init_bank
from muir.synthetic import JointLinearModel, SyntheticConfig, generate_synthetic
from muir.tensor import Adam, Tape
from muir.theory import EAParams, run_decomposed_ea_batch

TINY = SyntheticConfig(n_groups=2, tasks_per_group=3, dim=4, n_train=6, n_val=3, n_test=5)


def tiny_config(**kw):
    base = dict(lam=2, p=0.5, lr=0.01, lr_s=0.05, n_iter=5, n_gen=4, n_final=5, seed=3)
    base.update(kw)
    return MuirConfig(**base)


# ---------------------------------------------------------------- beliefs


def test_init_soft_weights_examples():
    np.testing.assert_allclose(init_soft_weights(8, 8 / 9), np.zeros(9), atol=1e-12)
    s = init_soft_weights(1, 0.9)
    np.testing.assert_allclose(s, [0.0, math.log(9.0)], atol=1e-12)
    with pytest.raises(ValueError):
        init_soft_weights(2, 1.0)
    with pytest.raises(ValueError):
        init_soft_weights(0, 0.5)


@given(st.integers(1, 20), st.floats(0.01, 0.99))
def test_incumbent_probability_is_one_minus_alpha(lam, alpha):
    p = np.exp(init_soft_weights(lam, alpha))
    p /= p.sum()
    assert p[0] == pytest.approx(1 - alpha)
    np.testing.assert_allclose(p[1:], alpha / lam)


@given(st.integers(1, 20))
def test_default_alpha_gives_uniform_beliefs(lam):
    alpha = MuirConfig(lam=lam).resolved_alpha
    assert alpha == pytest.approx(lam / (lam + 1))
    np.testing.assert_allclose(init_soft_weights(lam, alpha), 0.0, atol=1e-12)


def test_score_sums_duplicate_slots():
    s = np.log([0.2, 0.3, 0.5])
    np.testing.assert_allclose(score_candidates(s, np.array([7, 4, 7])), [0.7, 0.3, 0.7])


def test_select_ties_go_to_incumbent():
    psis = np.array([[5], [6]])
    assert select_slots(np.zeros((1, 2)), psis).tolist() == [0]
    psis = np.array([[5], [6], [6]])
    assert select_slots(np.log([[0.5, 0.25, 0.25]]), psis).tolist() == [0]
    assert select_slots(np.log([[0.4, 0.3, 0.3]]), psis).tolist() == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(-30, 30))
def test_selection_is_shift_invariant(seed, lam, shift):
    rng = np.random.default_rng(seed)
    psis = rng.integers(4, size=(lam + 1, 5))
    s = rng.standard_normal((5, lam + 1))
    np.testing.assert_array_equal(select_slots(s + shift, psis), select_slots(s, psis))


# ---------------------------------------------------------------- proposals


def test_subset_size():
    assert subset_size(0.5, 30) == 15
    assert subset_size(0.5, 31) == 16
    assert subset_size(0.3, 10) == 3
    assert subset_size(1e-9, 10) == 1
    assert subset_size(1.0, 7) == 7


def test_sample_probabilities_match_draws():
    psi0 = np.array([0, 0, 0, 1, 2, 2])
    probs, p_new = sample_probabilities(psi0, 0.1, True, 4)
    np.testing.assert_allclose(probs, [0.45, 0.15, 0.3, 0.0])
    assert p_new == 0.1
    rng = np.random.default_rng(0)
    draws = np.array([proportional_sample(psi0, 0.1, rng) for _ in range(20000)])
    assert abs(np.mean(draws == NEW) - 0.1) < 0.01
    for k in range(3):
        assert abs(np.mean(draws == k) - probs[k]) < 0.01
    probs, p_new = sample_probabilities(psi0, 0.1, False, 4)
    assert p_new == 0.0 and probs.sum() == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0), st.integers(1, 6))
def test_proposals_only_touch_the_perturbed_subset(seed, p, lam):
    rng = np.random.default_rng(seed)
    psi0 = rng.integers(5, size=12)
    psis, locs = propose_candidates(psi0, p, lam, rng)
    assert psis.shape == (lam + 1, 12)
    np.testing.assert_array_equal(psis[0], psi0)
    assert len(locs) == subset_size(p, 12) == math.ceil(round(p * 12, 9))
    untouched = np.setdiff1d(np.arange(12), locs)
    assert (psis[:, untouched] == psi0[untouched]).all()
    assert set(np.unique(psis)) <= set(np.unique(psi0))


def test_new_modules_only_when_bank_has_room():
    cfg = BankConfig(c=1, m=2, n=1)
    bank, psi0 = init_bank([2] * 6, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    psis, _ = propose_candidates(psi0, 1.0, 3, rng, eps=0.9, bank=bank)
    assert (psis >= 0).all() and bank.active_count == 6

    psi0 = np.array([0, 0, 2, 3, 4, 5])
    bank.set_usage(psi0)
    created = []
    psis, _ = propose_candidates(psi0, 1.0, 3, rng, eps=0.9, bank=bank, on_new=lambda k, l: created.append(k))
    assert created == [1]  # the single free id, then the bank is full again
    assert bank.active_count == 6 and bank.usage[1] == 0
    assert (psis >= 0).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_commit_keeps_usage_consistent(seed, lam):
    rng = np.random.default_rng(seed)
    bank, psi0 = init_bank([2] * 8, BankConfig(c=1, m=2, n=1), rng)
    state = AlignmentState(psi0.copy())
    for _ in range(5):
        state.psis, _ = propose_candidates(state.psi0, 0.5, lam, rng, 0.3, bank)
        state.s = rng.standard_normal((8, lam + 1))
        expected = state.psis[select_slots(state.s, state.psis), np.arange(8)]
        commit_selection(state, bank)
        np.testing.assert_array_equal(state.psi0, expected)
        assert bank.usage.sum() == 8
        np.testing.assert_array_equal(bank.usage, np.bincount(state.psi0, minlength=bank.capacity))
        np.testing.assert_array_equal(bank.alive, bank.usage > 0)


# ---------------------------------------------------------------- theory link


def linear_selection_iterations(L, trials, seed):
    """Generations until all locations hold module 0 when the belief of a slot
    is 1 for module 0 and 0 otherwise (lam = 1, p = 1, no NEW modules)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        psi = np.arange(L)
        t = 0
        while (psi != 0).any():
            t += 1
            psis, _ = propose_candidates(psi, 1.0, 1, rng)
            s = np.where(psis.T == 0, 50.0, 0.0)
            psi = psis[select_slots(s, psis), np.arange(L)]
        out.append(t)
    return np.array(out)


def test_belief_selection_matches_decomposed_ea_statistics():
    L, trials = 8, 1500
    ours = linear_selection_iterations(L, trials, seed=0)
    params = EAParams(L, L, L, 1, "proportional", "pessimistic")
    ref, done = run_decomposed_ea_batch(params, trials, np.random.default_rng(1))
    assert done.all()
    se = math.sqrt(ours.var() / trials + ref.var() / trials)
    assert abs(ours.mean() - ref.mean()) < 4 * se
    assert abs(np.median(ours) - np.median(ref)) <= 1


# ---------------------------------------------------------------- full loop


def build_model(seed=0, c=1):
    ts = generate_synthetic(seed, TINY)
    return JointLinearModel.build(ts, c=c, seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        MuirConfig(p=0.0)
    with pytest.raises(ValueError):
        MuirConfig(eps=1.0)
    with pytest.raises(ValueError):
        MuirConfig(lam=2, alpha=1.5)
    with pytest.raises(ValueError):
        MuirConfig(selection="greedy")
    with pytest.raises(ValueError):
        MuirConfig(eval_point="never")
    with pytest.raises(ValueError):
        MuirConfig(n_iter=-1)


def test_run_is_deterministic():
    a = run_muir(build_model(), tiny_config())
    b = run_muir(build_model(), tiny_config())
    assert a.alignments == b.alignments
    assert [r["val_mean"] for r in a.history] == [r["val_mean"] for r in b.history]


def test_history_rows_and_usage_after_every_generation():
    model = build_model()
    res = run_muir(model, tiny_config(n_gen=6))
    assert [r["generation"] for r in res.history] == list(range(7))
    for psi, row in zip(res.alignments, res.history):
        assert row["active_K"] >= len(set(psi))
    assert model.bank.usage.sum() == model.bank.L
    np.testing.assert_array_equal(model.bank.usage, np.bincount(res.psi0, minlength=model.bank.capacity))


def test_frozen_selection_never_moves_alignment():
    psi0 = np.array([0, 0, 0, 3, 3, 3])
    res = run_muir(build_model(), tiny_config(selection="frozen"), psi0=psi0)
    assert all(a == psi0.tolist() for a in res.alignments)


def test_revert_restores_best_state_bit_identically():
    model = build_model()
    res = run_muir(model, tiny_config(n_gen=6, n_final=0))
    best = res.best
    np.testing.assert_array_equal(model.bank.H, best.bank.H)
    np.testing.assert_array_equal(model.bank.z, best.bank.z)
    np.testing.assert_array_equal(res.psi0, best.psi0)
    val = model.evaluate(model.bank.generate_all(res.psi0), {}, "val")
    assert float(val.mean()) == best.val_mean


def test_patience_stops_early():
    res = run_muir(build_model(), tiny_config(n_gen=50, patience=2, n_iter=1, lr=1e-9, lr_s=1e-9))
    assert res.stopped_early
    assert len(res.history) <= 1 + res.best.generation + 2


@pytest.mark.parametrize("eval_point", ["after_commit", "before_commit"])
def test_eval_points_produce_finite_metrics(eval_point):
    res = run_muir(build_model(), tiny_config(eval_point=eval_point))
    assert all(np.isfinite(r["val_mean"]) for r in res.history)


def test_no_generations_equals_plain_training():
    steps = 7
    model = build_model(seed=2)
    H0 = model.bank.H.copy()
    run_muir(model, tiny_config(n_gen=0, n_init=3, n_final=steps - 3))

    ref = build_model(seed=2)
    np.testing.assert_array_equal(ref.bank.H, H0)
    adam = Adam(lr=0.01, lr_overrides={"s": 0.05})
    psi = np.arange(ref.bank.L)
    for _ in range(steps):
        tape = Tape()
        H, z = tape.var(ref.bank.H), tape.var(ref.bank.z)
        loss, _ = ref.loss_var(tape, generate_var(H, z, psi), {}, None)
        gH, gz = tape.gradient(loss, [H, z])
        adam.step({"H": ref.bank.H, "z": ref.bank.z}, {"H": gH, "z": gz})
    np.testing.assert_array_equal(model.bank.H, ref.bank.H)
    np.testing.assert_array_equal(model.bank.z, ref.bank.z)


def test_lambda_zero_is_plain_training():
    a = build_model(seed=1)
    run_muir(a, tiny_config(lam=0, n_gen=3, n_final=0))
    b = build_model(seed=1)
    run_muir(b, tiny_config(n_gen=0, n_init=15, n_final=0))
    np.testing.assert_array_equal(a.bank.H, b.bank.H)


def test_exact_sharing_trains_modules_only():
    model = build_model(c=0)
    z0 = model.bank.z.copy()
    run_muir(model, tiny_config())
    np.testing.assert_array_equal(model.bank.z, z0)
