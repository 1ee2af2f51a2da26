"""Acceptance suite: one test per criterion, each printing a PASS line.

Fast criteria run in the default selection; long statistical end-to-end
checks carry the ``slow`` marker (run everything with plain ``pytest``,
or ``pytest -m "not slow"`` for the quick gate).
"""

import time
from pathlib import Path

import numpy as np
import pytest

from hamsr import autodiff as ad
from hamsr import coupling as cp
from hamsr import engine, sampling, systems
from hamsr import expressions as ex
from hamsr import integrators as integ
from hamsr.engine import RunReport, TrainingConfig
from hamsr.errors import DomainError

FIXTURES = Path(__file__).parent / "fixtures"


def _announce(n, name, detail=""):
    print(f"\nACCEPTANCE {n} {name}: PASS {detail}")


# -- 1 ----------------------------------------------------------------------


def test_acceptance_01_integrator_order():
    t0 = time.perf_counter()
    field = integ.GradientField(dT_dp=lambda p: p, dV_dq=lambda q: q)

    def one_period_error(h):
        n = int(round(2 * np.pi / h))
        q, p = np.array([1.0]), np.array([0.0])
        for _ in range(n):
            q, p = integ.step4(q, p, 2 * np.pi / n, field)
        return float(np.hypot(q[0] - 1.0, p[0]))

    hs = np.array([0.2, 0.1, 0.05, 0.025])
    errs = np.array([one_period_error(h) for h in hs])
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 3.7 <= slope <= 4.3

    free = integ.GradientField(dT_dp=lambda p: p, dV_dq=lambda q: 0.0 * q)
    q, p = integ.step4(np.array([0.0]), np.array([1.0]), 0.1, free)
    assert q[0] == pytest.approx(0.1, rel=1e-14)
    assert p[0] == 1.0

    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _announce(1, "integrator order", f"(slope {slope:.3f}, {elapsed:.2f}s)")


# -- 2 ----------------------------------------------------------------------


def test_acceptance_02_gradient_fidelity(oscillator_ds1):
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    lib = ex.make_library(
        ("add", "sub", "mul", "div", "pow", "cos", "sin"), ("q1x", "p1x")
    )

    # expression constant tangents on >= 10 random instances
    from conftest import random_tree

    checked = 0
    while checked < 10:
        tree = ex.parse_preorder(random_tree(rng, lib), lib)
        if tree.n_slots == 0 or not tree.variables:
            continue
        bind = {"q1x": float(rng.uniform(0.3, 1.2)), "p1x": float(rng.uniform(0.3, 1.2))}
        consts = rng.uniform(0.4, 1.5, tree.n_slots)
        try:
            ct = ex.const_tangents(tree, bind, consts)
            h = 1e-5
            for s in range(tree.n_slots):
                up, dn = consts.copy(), consts.copy()
                up[s] += h
                dn[s] -= h
                fd = (ex.evaluate(tree, bind, up) - ex.evaluate(tree, bind, dn)) / (2 * h)
                if abs(fd) > 1e-5:
                    assert abs(ct.value[s] - fd) / max(abs(fd), 1e-9) < 1e-3
        except DomainError:
            continue
        checked += 1

    # MLP + LSTM backprop
    from hamsr import nn

    store = nn.ParamStore()
    mlp = nn.Mlp(nn.MlpConfig(3, 1, 10, 3), store, "m", rng)
    x = ad.Tensor(rng.standard_normal((4, 3)))

    def mlp_loss():
        return ad.tsum(ad.square(mlp.forward(x)))

    _check_grads_subset(mlp_loss, store.tensors(), rng, tol=1e-3)

    store2 = nn.ParamStore()
    lstm = nn.Lstm(nn.LstmConfig(4, 3, 6, 2), store2, "l", rng)
    xs = rng.standard_normal((5, 2, 4))

    def lstm_loss():
        state = lstm.initial_state(2)
        total = None
        for t in range(5):
            logits, state = lstm.step(ad.Tensor(xs[t]), state)
            s = ad.tsum(ad.square(logits))
            total = s if total is None else ad.add(total, s)
        return total

    _check_grads_subset(lstm_loss, store2.tensors(), rng, tol=1e-3)

    # end-to-end constant gradients through a full rollout
    cand = _osc_structure()
    for trial in range(10):
        consts = rng.uniform(0.3, 1.8, 2)
        c = cand.with_constants(consts)
        try:
            loss, grads = integ.rollout_loss_and_const_grads(
                c, oscillator_ds1, horizon=3, substeps=2
            )
        except DomainError:
            continue
        h = 1e-6
        for i in range(2):
            up, dn = consts.copy(), consts.copy()
            up[i] += h
            dn[i] -= h
            lu, _ = integ.rollout_loss_and_const_grads(
                cand.with_constants(up), oscillator_ds1, horizon=3, substeps=2
            )
            ld, _ = integ.rollout_loss_and_const_grads(
                cand.with_constants(dn), oscillator_ds1, horizon=3, substeps=2
            )
            fd = (lu - ld) / (2 * h)
            assert abs(grads[i] - fd) / max(abs(fd), 1e-10) < 1e-3

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _announce(2, "gradient fidelity", f"({elapsed:.1f}s)")


def _check_grads_subset(loss_fn, params, rng, tol, n_coords=10):
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {
        id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for p in params
    }
    coords = []
    for p in params:
        for _ in range(max(1, n_coords // len(params))):
            coords.append((p, tuple(rng.integers(0, s) for s in p.value.shape)))
    h = 1e-5
    for p, idx in coords[:n_coords]:
        old = p.value[idx]
        p.value[idx] = old + h
        with ad.no_grad():
            up = float(loss_fn().value)
        p.value[idx] = old - h
        with ad.no_grad():
            dn = float(loss_fn().value)
        p.value[idx] = old
        fd = (up - dn) / (2 * h)
        if abs(fd) > 1e-7:
            assert abs(analytic[id(p)][idx] - fd) / max(abs(fd), 1e-9) < tol


def _osc_structure():
    lib = ex.make_library(("add", "sub", "mul", "div", "pow"), ("q1x", "p1x"))
    T = ex.parse_preorder(["mul", "const", "mul", "p1x", "p1x"], lib)
    V = ex.parse_preorder(["mul", "const", "mul", "q1x", "q1x"], lib)
    return ex.combine_parsed(T, V)


# -- 3 ----------------------------------------------------------------------


def test_acceptance_03_data_generation():
    t0 = time.perf_counter()
    for kind in systems.SYSTEM_KINDS:
        for idx in (1, 2, 3):
            spec = systems.paper_system(kind, idx)
            ds = systems.generate(spec)
            H = systems.hamiltonian_values(spec, ds.trajectory())
            assert np.max(np.abs(H - H[0]) / abs(H[0])) < 1e-6, (kind, idx)
            if kind in ("two_body", "three_body"):
                ptot = ds.p.reshape(ds.n_points, spec.n_bodies, spec.n_dims).sum(axis=1)
                assert np.max(np.abs(ptot - ptot[0])) < 1e-8, (kind, idx)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _announce(3, "data generation", f"(12 datasets, {elapsed:.1f}s)")


# -- 4 ----------------------------------------------------------------------


def _experiment_constraints():
    two_body_priors = cp.CouplingSpec(
        T_form=cp.CouplingForm("complete_decoupling"),
        T_symmetric=True,
        V_form=cp.CouplingForm("pairwise", ((1, 2),)),
        V_composite="euclidean",
    )
    three_body_priors = cp.CouplingSpec(
        T_form=cp.CouplingForm("complete_decoupling"),
        T_symmetric=True,
        V_form=cp.CouplingForm("pairwise", ((1, 2), (1, 3), (2, 3))),
        V_composite="euclidean",
        V_symmetric=True,
    )
    return {
        "oscillator": sampling.build_constraints(1, 1, min_ops=1, max_ops=8),
        "pendulum": sampling.build_constraints(
            1, 1, operators=sampling.TRIG_OPERATORS, min_ops=1, max_ops=8
        ),
        "two_body": sampling.build_constraints(
            2, 2, min_ops=1, max_ops=12, coupling=two_body_priors
        ),
        "three_body": sampling.build_constraints(
            3, 2, min_ops=1, max_ops=18, coupling=three_body_priors
        ),
    }


def test_acceptance_04_sampler_validity():
    t0 = time.perf_counter()
    total_tokens = 0
    total_mutated = 0
    for name, cons in _experiment_constraints().items():
        policy = sampling.PolicyNet(cons.lib, seed=17, hidden_dim=64, layers=2)
        batch = sampling.sample_batch(
            policy, cons, 10_000, 0.05, np.random.default_rng(99)
        )
        op_names = {t.symbol for t in cons.lib.operators}
        for cand in batch:
            assert len(cand.slot_sequences) == len(cons.slots)
            for slot, seq in zip(cons.slots, cand.slot_sequences):
                ex.parse_preorder(seq, cons.lib)  # parses
                n_ops = sum(1 for s in seq if s in op_names)
                assert cons.min_ops <= n_ops <= cons.max_ops
                used = {s for s in seq if s not in op_names and s != "const"}
                assert used <= set(slot.formals)  # coupling template respected
            c = cand.candidate
            assert all(v.startswith("p") for v in c.momenta)
            assert all(v.startswith("q") for v in c.positions)
            total_tokens += len(cand.mutated)
            total_mutated += cand.n_mutated
    rate = total_mutated / total_tokens
    assert 0.03 <= rate <= 0.07
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    _announce(4, "sampler validity", f"(mutation rate {rate:.4f}, {elapsed:.0f}s)")


# -- 5 ----------------------------------------------------------------------


def test_acceptance_05_constant_fitting(oscillator_ds1):
    t0 = time.perf_counter()
    truth, _ = systems.ground_truth(oscillator_ds1.spec)
    cfg = TrainingConfig()
    cand = _osc_structure()
    hits = 0
    for seed in range(10):
        consts, reward, valid, _ = engine.optimize_constants(
            cand, oscillator_ds1, cfg, seed=seed
        )
        if valid and ex.numeric_equivalence(
            cand.with_constants(consts),
            truth,
            {"q1x": (-1, 1), "p1x": (-1, 1)},
            1e-2,
            seed=0,
        ):
            hits += 1
    assert hits >= 8
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    _announce(5, "constant fitting", f"({hits}/10 within 1e-2, {elapsed:.1f}s)")


# -- 6 ----------------------------------------------------------------------


@pytest.mark.slow
def test_acceptance_06_oscillator_end_to_end(oscillator_ds1):
    t0 = time.perf_counter()
    clean_hits = 0
    for seed in range(5):
        rep = engine.discover(
            oscillator_ds1, cfg=TrainingConfig(master_seed=seed, max_batches=30)
        )
        clean_hits += rep.recovered
    noisy = systems.add_noise(oscillator_ds1, 0.001, seed=7)
    noisy_hits = 0
    for seed in range(5):
        rep = engine.discover(
            noisy, cfg=TrainingConfig(master_seed=seed, max_batches=40)
        )
        noisy_hits += rep.recovered
    assert clean_hits >= 4
    assert noisy_hits >= 3
    _announce(
        6,
        "oscillator end-to-end",
        f"(clean {clean_hits}/5 <=30, noisy {noisy_hits}/5 <=40, "
        f"{time.perf_counter() - t0:.0f}s)",
    )


# -- 7 ----------------------------------------------------------------------


@pytest.mark.slow
def test_acceptance_07_pendulum_end_to_end():
    t0 = time.perf_counter()
    ds = systems.generate(systems.paper_system("pendulum", 2))
    hits = 0
    for seed in range(5):
        rep = engine.discover(
            ds, cfg=TrainingConfig(master_seed=seed, max_batches=80)
        )
        hits += rep.recovered
    assert hits >= 3
    _announce(
        7, "pendulum end-to-end", f"({hits}/5 <=80, {time.perf_counter() - t0:.0f}s)"
    )


# -- 8 ----------------------------------------------------------------------


@pytest.mark.slow
def test_acceptance_08_coupling_extraction(two_body_ds1):
    # Reduced network/epoch scale keeps the search tractable on one core;
    # the structural verdicts are what the criterion pins down, and the
    # published appendix tolerances are explicitly not required.
    t0 = time.perf_counter()
    cfg = cp.SearchConfig(
        max_tolerable_decrease=0.10,
        hidden_dim=32,
        depth=3,
        epochs=260,
        seeds=2,
        lr=0.002,
    )
    structure_hits = 0
    big_drop_seen = 0
    for master_seed in range(3):
        result = cp.coupling_search(two_body_ds1, cfg, master_seed=master_seed)
        spec = result.spec
        ok = (
            spec.V_form.kind == "pairwise"
            and spec.V_composite == "euclidean"
            and spec.T_form.kind == "complete_decoupling"
            and spec.T_symmetric
        )
        structure_hits += ok
        # the first-stage complete-decoupling probe (the -38% row) must
        # breach the 10% tolerance
        probe = next(
            r for r in result.rows
            if r.stage == "couple V" and "complete" in r.V_desc
        )
        if probe.change is not None and probe.change < -0.10:
            big_drop_seen += 1
        print(
            f"\n  master seed {master_seed}: "
            f"T={spec.describe('T')} V={spec.describe('V')} "
            f"decoupling-probe change={probe.change:+.1%}"
        )
    assert structure_hits >= 2
    assert big_drop_seen >= 2
    _announce(
        8,
        "coupling extraction",
        f"({structure_hits}/3 structures, {time.perf_counter() - t0:.0f}s)",
    )


# -- 9 ----------------------------------------------------------------------


@pytest.mark.slow
def test_acceptance_09_two_body_with_priors(two_body_ds1):
    t0 = time.perf_counter()
    priors = cp.CouplingSpec(
        T_form=cp.CouplingForm("complete_decoupling"),
        T_symmetric=True,
        V_form=cp.CouplingForm("pairwise", ((1, 2),)),
        V_composite="euclidean",
    )
    hits = 0
    for seed in range(5):
        rep = engine.discover(
            two_body_ds1,
            priors=priors,
            cfg=TrainingConfig(master_seed=seed, max_batches=10),
        )
        hits += rep.recovered
    assert hits >= 3
    _announce(
        9,
        "two-body with priors",
        f"({hits}/5 <=10 batches, {time.perf_counter() - t0:.0f}s)",
    )


# -- 10 ---------------------------------------------------------------------


def test_acceptance_10_three_body_properties():
    t0 = time.perf_counter()
    # conservation is covered by criterion 3; revalidate the template and the
    # retained successful recovery run
    priors = cp.CouplingSpec(
        T_form=cp.CouplingForm("complete_decoupling"),
        T_symmetric=True,
        V_form=cp.CouplingForm("pairwise", ((1, 2), (1, 3), (2, 3))),
        V_composite="euclidean",
        V_symmetric=True,
    )
    cons = sampling.build_constraints(3, 2, min_ops=1, max_ops=18, coupling=priors)
    pol = sampling.PolicyNet(cons.lib, seed=3, hidden_dim=48, layers=2)
    batch = sampling.sample_batch(pol, cons, 2000, 0.05, np.random.default_rng(1))
    for cand in batch:
        assert len(cand.candidate.momenta) <= 6
        for slot, seq in zip(cons.slots, cand.slot_sequences):
            used = {s for s in seq if s in ("r", "p1x")}
            assert used <= set(slot.formals)

    report = RunReport.load(FIXTURES / "three_body_recovery.json")
    assert report.recovered
    assert report.mode == "experiment"
    spec = systems.paper_system("three_body", 1)
    truth, _ = systems.ground_truth(spec)
    recovered = ex.parse_hamiltonian_text(report.best_expression)
    ds = systems.generate(spec)
    assert ex.numeric_equivalence(
        recovered,
        truth,
        ds.state_ranges(),
        1e-2,
        seed=0,
        max_grad=engine._truth_gradient_cap(truth, ds),
    )
    _announce(
        10,
        "three-body properties + fixture",
        f"(recovered in {report.batches_used} batches, "
        f"{time.perf_counter() - t0:.0f}s)",
    )


# -- 11 ---------------------------------------------------------------------


def test_acceptance_11_rl_mechanics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    records = [
        engine.RewardRecord(
            sampled=None, constants=np.zeros(0), reward=float(r), valid=True,
            seconds=0.0,
        )
        for r in rng.permutation(np.linspace(0.001, 0.999, 500))
    ]
    kept, r_eps = engine.risk_filter(records, 0.05, 500)
    assert len(kept) == 25
    assert min(r.reward for r in kept) >= r_eps

    # constant rewards: the reward-weighted gradient term vanishes
    cons = sampling.build_constraints(1, 1, min_ops=1, max_ops=6)
    pol = sampling.PolicyNet(cons.lib, seed=0, hidden_dim=16, layers=2)
    batch = sampling.sample_batch(pol, cons, 10, 0.0, np.random.default_rng(2))
    lp, _ = sampling.replay_log_probs(pol, cons, batch)
    weights = np.zeros((10, 1))  # R - R_eps with all rewards equal
    pol.store.zero_grad()
    ad.tsum(ad.mul(lp, ad.Tensor(weights))).backward()
    for t in pol.parameters():
        if t.grad is not None:
            assert np.max(np.abs(t.grad)) < 1e-9

    # 20 synthetic updates strictly increase the target's probability
    from hamsr.nn import Adam

    pol = sampling.PolicyNet(cons.lib, seed=0, hidden_dim=24, layers=2)
    opt = Adam(lr=0.002)
    cfg = TrainingConfig()
    target = ("mul", "p1x", "p1x")

    def prob():
        b = sampling.sample_batch(pol, cons, 1000, 0.0, np.random.default_rng(0))
        return sum(1 for c in b if c.slot_sequences[0] == target) / 1000

    before = prob()
    sample_rng = np.random.default_rng(5)
    for _ in range(20):
        b = sampling.sample_batch(pol, cons, 64, 0.05, sample_rng)
        recs = [
            engine.RewardRecord(
                sampled=c,
                constants=np.zeros(0),
                reward=1.0 if c.slot_sequences[0] == target else 0.1,
                valid=True,
                seconds=0.0,
            )
            for c in b
        ]
        kept, r_eps = engine.risk_filter(recs, 0.1, 64)
        engine.policy_update(pol, cons, kept, r_eps, cfg, opt)
    after = prob()
    assert after > before
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    _announce(
        11,
        "rl mechanics",
        f"(P(target) {before:.3f} -> {after:.3f}, {elapsed:.0f}s)",
    )
