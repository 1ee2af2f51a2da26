import numpy as np
import pytest

from hamsr import autodiff as ad
from hamsr import sampling
from hamsr.coupling import CouplingForm, CouplingSpec
from hamsr.errors import TokenInvalidUnderMaskError
from hamsr.expressions import parse_preorder


def osc_constraints():
    return sampling.build_constraints(1, 1, min_ops=1, max_ops=8)


def small_policy(cons, seed=0):
    return sampling.PolicyNet(cons.lib, seed=seed, hidden_dim=24, layers=2)


def test_first_token_must_be_operator():
    cons = osc_constraints()
    state = sampling.TraversalState(cons)
    mask = state.valid_mask()
    meta = state.meta
    assert all(mask[i] == meta.is_operator[i] for i in range(meta.size))


def test_single_valid_token_probability_one():
    cons = osc_constraints()
    meta = sampling._LibMeta(cons.lib)
    logits = np.random.default_rng(0).standard_normal((1, meta.size))
    mask = np.zeros((1, meta.size), dtype=bool)
    mask[0, 2] = True
    logp = sampling._masked_log_probs(logits, mask)
    probs = np.exp(logp)
    assert probs[0, 2] == pytest.approx(1.0, abs=1e-12)
    assert probs[0].sum() == pytest.approx(1.0, abs=1e-9)


def test_operator_mask_at_budget_boundary():
    cons = sampling.build_constraints(1, 1, min_ops=1, max_ops=2)
    state = sampling.TraversalState(cons)
    for sym in ("mul", "mul", "p1x"):
        state.advance(state.meta.index[sym])
    # two operators used: only terminals of the kinetic slot may continue
    mask = state.valid_mask()
    assert not mask[state.meta.is_operator].any()
    assert mask[state.meta.index["p1x"]]
    assert mask[state.meta.index["const"]]
    assert not mask[state.meta.index["q1x"]]  # potential-side variable


def test_terminal_mask_below_min_ops():
    cons = sampling.build_constraints(1, 1, min_ops=3, max_ops=8)
    state = sampling.TraversalState(cons)
    state.advance(state.meta.index["mul"])  # 1 op, two open branches
    state.advance(state.meta.index["p1x"])  # close left branch
    # one open branch, 1 < min_ops: terminals must be masked
    mask = state.valid_mask()
    assert mask[state.meta.is_operator].all()
    assert not mask[~state.meta.is_operator].any()


def test_masked_distributions_sum_to_one():
    cons = osc_constraints()
    pol = small_policy(cons)
    rng = np.random.default_rng(0)
    meta = sampling._LibMeta(cons.lib)
    logits = rng.standard_normal((64, meta.size)) * 3
    masks = np.zeros((64, meta.size), dtype=bool)
    for i in range(64):
        idx = rng.choice(meta.size, size=rng.integers(1, meta.size), replace=False)
        masks[i, idx] = True
    probs = np.exp(sampling._masked_log_probs(logits, masks))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(probs[~masks] == 0.0)


def test_samples_parse_and_respect_partition():
    cons = sampling.build_constraints(
        1, 1, operators=sampling.TRIG_OPERATORS, min_ops=1, max_ops=8
    )
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 2000, 0.05, np.random.default_rng(3))
    for cand in batch:
        t_seq, v_seq = cand.slot_sequences
        parse_preorder(t_seq, cons.lib)
        parse_preorder(v_seq, cons.lib)
        assert "q1x" not in t_seq
        assert "p1x" not in v_seq
        t_ops = sum(1 for s in t_seq if s in sampling.TRIG_OPERATORS)
        v_ops = sum(1 for s in v_seq if s in sampling.TRIG_OPERATORS)
        assert 1 <= t_ops <= 8
        assert 1 <= v_ops <= 8
        assert cand.candidate.momenta <= ("p1x",)
        assert cand.candidate.positions <= ("q1x",)


def test_mutation_rate_one_flags_everything():
    cons = osc_constraints()
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 20, 0.999999, np.random.default_rng(0))
    for cand in batch:
        assert all(cand.mutated)


def test_mutation_rate_empirical_fraction():
    cons = osc_constraints()
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 3000, 0.05, np.random.default_rng(8))
    total = sum(len(c.mutated) for c in batch)
    mutated = sum(c.n_mutated for c in batch)
    assert total > 1e4
    assert 0.03 <= mutated / total <= 0.07


def test_zero_mutation_with_peaked_policy_is_deterministic():
    cons = osc_constraints()
    pol = small_policy(cons)
    # sharpen the head so every step has a dominant valid token
    pol.store["policy.bo"].value[:] = 0.0
    pol.store["policy.bo"].value[cons.lib.index("mul")] = 40.0
    pol.store["policy.bo"].value[cons.lib.index("p1x")] = 20.0
    pol.store["policy.bo"].value[cons.lib.index("q1x")] = 20.0
    a = sampling.sample_batch(pol, cons, 4, 0.0, np.random.default_rng(0))
    b = sampling.sample_batch(pol, cons, 4, 0.0, np.random.default_rng(1))
    assert {c.key for c in a} == {c.key for c in b}
    assert len({c.key for c in a}) == 1


def test_replay_matches_sampled_accounting():
    cons = osc_constraints()
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 64, 0.3, np.random.default_rng(5))
    for cand in batch[:16]:
        lp, ent = sampling.log_prob_and_entropy(pol, cons, cand)
        assert lp == pytest.approx(cand.log_prob, abs=1e-9)
        assert ent == pytest.approx(cand.entropy, abs=1e-9)
    # replay of a replay is bit-identical
    lp1, ent1 = sampling.log_prob_and_entropy(pol, cons, batch[0])
    lp2, ent2 = sampling.log_prob_and_entropy(pol, cons, batch[0])
    assert lp1 == lp2 and ent1 == ent2


def test_mutation_does_not_change_accounting():
    cons = osc_constraints()
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 64, 0.6, np.random.default_rng(9))
    mutated = next(c for c in batch if c.n_mutated)
    lp, ent = sampling.log_prob_and_entropy(pol, cons, mutated)
    assert lp == pytest.approx(mutated.log_prob, abs=1e-9)


def test_uniform_policy_closed_form_log_prob():
    cons = osc_constraints()
    pol = small_policy(cons)
    for t in pol.store.tensors():
        t.value = np.zeros_like(t.value)
    batch = sampling.sample_batch(pol, cons, 32, 0.0, np.random.default_rng(2))
    for cand in batch:
        state = sampling.TraversalState(cons)
        expected_lp = 0.0
        expected_ent = 0.0
        for tok in cand.chosen_ids:
            k = int(state.valid_mask().sum())
            expected_lp -= np.log(k)
            expected_ent += np.log(k)
            state.advance(tok)
        assert cand.log_prob == pytest.approx(expected_lp, abs=1e-9)
        assert cand.entropy == pytest.approx(expected_ent, abs=1e-9)


def test_replay_rejects_foreign_sequence():
    cons = osc_constraints()
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 4, 0.0, np.random.default_rng(0))
    bad = sampling.SampledCandidate(
        tokens=("q1x",),
        slot_sequences=(("q1x",),),
        chosen_ids=(cons.lib.index("q1x"),),
        mutated=(False,),
        log_prob=0.0,
        entropy=0.0,
        candidate=batch[0].candidate,
    )
    with pytest.raises(TokenInvalidUnderMaskError):
        sampling.log_prob_and_entropy(pol, cons, bad)


def test_log_prob_gradients_match_finite_differences():
    cons = osc_constraints()
    pol = sampling.PolicyNet(cons.lib, seed=1, hidden_dim=6, layers=2)
    batch = sampling.sample_batch(pol, cons, 3, 0.1, np.random.default_rng(4))
    params = pol.parameters()

    def loss():
        lp, ent = sampling.replay_log_probs(pol, cons, batch)
        return ad.add(ad.tsum(lp), ad.mul(ad.tsum(ent), ad.Tensor(0.5)))

    pol.store.zero_grad()
    out = loss()
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.value)
        for p in params
    ]

    def value():
        with ad.no_grad():
            return float(loss().value)

    numeric = ad.finite_difference_grads(value, params, h=1e-5)
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(n).max(), 1e-6)
        assert np.max(np.abs(a - n)) / scale < 1e-4


# ---------------------------------------------------------------------------
# Coupling templates


def two_body_priors():
    return CouplingSpec(
        T_form=CouplingForm("complete_decoupling"),
        V_form=CouplingForm("pairwise", ((1, 2),)),
        V_composite="euclidean",
        T_symmetric=True,
    )


def test_template_slots_two_body():
    cons = sampling.build_constraints(
        2, 2, min_ops=1, max_ops=12, coupling=two_body_priors()
    )
    assert len(cons.slots) == 2
    t_slot, v_slot = cons.slots
    assert t_slot.part == "T" and len(t_slot.instantiations) == 4
    assert t_slot.formals == ("p1x",)
    assert v_slot.part == "V" and len(v_slot.instantiations) == 1
    assert v_slot.formals == ("r12",)


def test_template_samples_instantiate_separably():
    cons = sampling.build_constraints(
        2, 2, min_ops=1, max_ops=12, coupling=two_body_priors()
    )
    pol = small_policy(cons)
    batch = sampling.sample_batch(pol, cons, 500, 0.05, np.random.default_rng(1))
    for cand in batch:
        assert set(cand.candidate.momenta) <= {"p1x", "p1y", "p2x", "p2y"}
        assert set(cand.candidate.positions) <= {"q1x", "q1y", "q2x", "q2y"}


def test_tied_slots_share_constants():
    cons = sampling.build_constraints(
        2, 2, min_ops=1, max_ops=12, coupling=two_body_priors()
    )
    cand = sampling.candidate_from_sequences(
        cons, [("mul", "const", "mul", "p1x", "p1x"), ("div", "const", "r12")]
    )
    # one T slot shared across four momenta + one V slot
    assert cand.n_slots == 2
    c = cand.with_constants([0.5, -1.0])
    # T = 0.5 sum p^2; V = -1/r
    val = c.value(
        {"p1x": 1.0, "p1y": 2.0, "p2x": 0.0, "p2y": 0.0,
         "q1x": 0.0, "q1y": 0.0, "q2x": 3.0, "q2y": 4.0}
    )
    assert val == pytest.approx(0.5 * 5.0 - 1.0 / 5.0)


def test_symmetric_template_value_is_permutation_invariant():
    cons = sampling.build_constraints(
        2, 2, min_ops=1, max_ops=12, coupling=two_body_priors()
    )
    cand = sampling.candidate_from_sequences(
        cons, [("mul", "const", "mul", "p1x", "p1x"), ("div", "const", "r12")]
    ).with_constants([0.7, 1.3])
    a = cand.value({"p1x": 0.3, "p1y": -0.2, "p2x": 0.9, "p2y": 0.1,
                    "q1x": 0.0, "q1y": 0.0, "q2x": 1.0, "q2y": 1.0})
    b = cand.value({"p2x": 0.3, "p2y": -0.2, "p1x": 0.9, "p1y": 0.1,
                    "q2x": 0.0, "q2y": 0.0, "q1x": 1.0, "q1y": 1.0})
    assert a == pytest.approx(b, rel=1e-12)


def test_three_body_template_counts():
    priors = CouplingSpec(
        T_form=CouplingForm("complete_decoupling"),
        V_form=CouplingForm("pairwise", ((1, 2), (1, 3), (2, 3))),
        V_composite="euclidean",
        T_symmetric=True,
        V_symmetric=True,
    )
    cons = sampling.build_constraints(3, 2, min_ops=1, max_ops=18, coupling=priors)
    t_slot, v_slot = cons.slots
    assert len(t_slot.instantiations) == 6
    assert len(v_slot.instantiations) == 3
    cand = sampling.candidate_from_sequences(
        cons, [("mul", "const", "mul", "p1x", "p1x"), ("div", "const", "r")]
    )
    assert len(cand.momenta) == 6
    assert len(cand.positions) == 6
