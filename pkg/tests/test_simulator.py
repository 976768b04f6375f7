from __future__ import annotations

import numpy as np
import pytest

from idealrec.data import DriftConfig, drift_steps, synth_drift_stream
from idealrec.generator import ModelBundle
from idealrec.kernel import Rng
from idealrec.models import BackboneConfig
from idealrec.mrd import MrdConfig, MrdDetector, balance, build_mrd_dataset, train_mrd
from idealrec.policy import Policy
from idealrec.simulator import (
    MrsScorer,
    ReplayContext,
    SimError,
    StepRecord,
    SweepEntry,
    calibrate_mrs,
    frequency_sweep,
    realized_frequency,
    revenue,
    revenue_arrays,
    revenue_report,
    run_replay,
    verify_state,
    write_step_log,
)


@pytest.fixture(scope="module")
def ctx(small_bundle, small_drift):
    return ReplayContext(small_bundle, small_drift[1][40:50])


@pytest.fixture(scope="module")
def detector(small_bundle, small_drift):
    ds = balance(build_mrd_dataset(small_drift[1][:40], small_bundle), 3.0, Rng(0))
    return train_mrd(ds, small_bundle, False, MrdConfig(epochs=2, seed=0))


@pytest.fixture(scope="module")
def scorer(ctx, detector):
    return MrsScorer(ctx, detector)


@pytest.fixture(scope="module")
def big_ctx(small_bundle):
    # 150 devices x 28 decision steps = 4200 decisions; items share the fixture's 80-item vocabulary
    data = synth_drift_stream(DriftConfig(users=150, items=80, domains=4, switch_prob=0.1, length=30, seed=11))
    return ReplayContext(small_bundle, drift_steps(data, 1, 30, 1, 30, seed=11))


def test_relative_scores_subtract_the_fresh_score(ctx, detector, scorer):
    rel = MrsScorer(ctx, detector, relative=True)
    T = ctx.T
    diag = scorer.table[:, np.arange(T), np.arange(T)]
    assert np.allclose(rel.table + diag[:, :, None], scorer.table, equal_nan=True, atol=1e-15)
    valid_diag = rel.table[:, np.arange(T), np.arange(T)][ctx.valid]
    assert np.all(valid_diag == 0.0)
    tau = calibrate_mrs(ctx, rel, 0.5)
    assert abs(realized_frequency(ctx, Policy("mrs", tau=tau), rel) - 0.5) <= 0.05


def test_always_policy(ctx):
    rep = run_replay(ctx, Policy("always"))
    assert rep.realized_freq == 1.0
    assert np.array_equal(rep.p_used, rep.p_fresh)


def test_never_policy_keeps_initial_params(ctx):
    rep = run_replay(ctx, Policy("never"))
    assert rep.realized_freq == 0.0
    assert np.array_equal(rep.p_used, rep.p_stale)
    assert np.all(rep.stale_from == 0)


def test_random_half_on_4000_steps_is_concentrated_and_reproducible(big_ctx, tmp_path):
    reps = [run_replay(big_ctx, Policy("random", p=0.5, rng=Rng(3))) for _ in range(2)]
    assert reps[0].decisions >= 4000
    assert 0.48 <= reps[0].realized_freq <= 0.52
    write_step_log(reps[0], tmp_path / "a.tsv")
    write_step_log(reps[1], tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_ledger_exactness_and_counterfactual_consistency(ctx, scorer):
    rep = run_replay(ctx, Policy("mrs", tau=float(np.nanmedian(scorer.table))), "ideal", scorer)
    records = rep.records()
    steps = {(r.device, r.t): r.decision for r in records}
    assert rep.decisions == len(steps)
    assert rep.requests == sum(steps.values())
    assert rep.realized_freq == rep.requests / rep.decisions
    for r in records:
        assert r.p_used == (r.p_fresh if r.decision else r.p_stale)
    assert 0 < rep.requests < rep.decisions


def test_stale_source_is_the_last_request(ctx):
    rep = run_replay(ctx, Policy("random", p=0.3, rng=Rng(8)))
    last: dict[int, int] = {}
    # decision rows run device by device in step order; indices are local to the replay window
    for dev, t, dec, src in zip(rep.device, rep.t, rep.decision, rep.stale_from):
        d = int(np.flatnonzero(ctx.users == dev)[0])
        local = int(np.flatnonzero(ctx.steps[d] == t)[0])
        assert src == last.get(d, 0)
        if dec:
            last[d] = local


def test_debug_mode_recomputes_state(ctx, scorer):
    rep = run_replay(ctx, Policy("random", p=0.4, rng=Rng(1)), debug=True)
    mask = ctx.valid.copy()
    mask[:, 0] = False
    d, t = np.nonzero(mask)
    rep.stale_from = np.where(rep.decision, rep.stale_from, t)  # pretend stale devices had fresh params
    with pytest.raises(SimError, match="does not match"):
        verify_state(ctx, rep, d, t, n=len(d))


def test_untrained_components_rejected(small_drift, ctx):
    raw = ModelBundle.initialize(BackboneConfig(vocab_size=80, dim=8), 0)
    with pytest.raises(SimError, match="not trained"):
        ReplayContext(raw, small_drift[1][:3])
    with pytest.raises(SimError, match="not trained"):
        MrsScorer(ctx, MrdDetector.initialize(8, False))
    with pytest.raises(SimError):
        run_replay(ctx, Policy("mrs", tau=0.5))


def test_revenue_zero_when_fresh_equals_stale(rng):
    labels = rng.integers(0, 2, size=(60, 3)).astype(float)
    p = rng.random((60, 3))
    res = revenue_arrays(np.repeat(np.arange(20), 3), rng.random(60), labels, p, p.copy(), 5)
    assert [r["revenue"] for r in res.rows] == [0.0] * 4


def test_revenue_one_when_stale_inverts_labels():
    labels = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    res = revenue_arrays(np.array([0, 0, 1, 1]), np.zeros(4), labels, labels.copy(), 1.0 - labels, 20)
    assert res.rows[0]["auc_fresh"] == 1.0 and res.rows[0]["auc_stale"] == 0.0
    assert res.rows[0]["revenue"] == 1.0


def test_single_class_groups_skipped():
    labels = np.array([[1.0], [1.0], [1.0], [0.0]])
    p = np.array([[0.9], [0.8], [0.7], [0.1]])
    res = revenue_arrays(np.array([0, 1, 2, 2]), np.zeros(4), labels, p, p, 2)
    assert res.skipped == [0] and [r["group"] for r in res.rows] == [1]


def test_revenue_invariant_to_record_order(ctx, scorer, rng):
    rep = run_replay(ctx, Policy("never"), "ideal", scorer)
    records = rep.records()
    shuffled = [records[i] for i in rng.permutation(len(records))]
    assert revenue(records, 3).rows == revenue(shuffled, 3).rows
    for a, b in zip(revenue(records, 3).rows, revenue_report(rep, 3).rows):
        assert a == pytest.approx(b, abs=1e-12)


def test_revenue_does_not_depend_on_decisions(ctx, scorer):
    a = run_replay(ctx, Policy("never"), "ideal", scorer)
    b = run_replay(ctx, Policy("always"), "ideal", scorer)
    assert [r["auc_fresh"] for r in revenue_report(a, 3).rows] == [r["auc_fresh"] for r in revenue_report(b, 3).rows]


def test_step_record_defaults():
    r = StepRecord(1, 2, True, None, 1, 0.5, 0.5, 0.4)
    assert r.lof is None and r.svdd is None


def test_mrs_calibration_hits_target_on_its_own_stream(big_ctx, detector):
    sc = MrsScorer(big_ctx, detector)
    for f in (0.2, 0.5, 0.8):
        tau = calibrate_mrs(big_ctx, sc, f)
        assert abs(realized_frequency(big_ctx, Policy("mrs", tau=tau), sc) - f) <= 0.02


def test_sweep_endpoints_bracket_never_and_always(ctx, scorer):
    entries = [SweepEntry("ideal", "mrs", scorer, scorer), SweepEntry("random", "random")]
    rows, _ = frequency_sweep([0.0, 1.0], entries, ctx, ctx, 0, "mean-pool-attention")
    never = run_replay(ctx, Policy("never")).metrics
    always = run_replay(ctx, Policy("always")).metrics
    for r in rows:
        ref = never if r["budget"] == 0.0 else always
        assert r["realized_freq"] == r["budget"]
        assert r["auc"] == ref["auc"] and r["ndcg@10"] == ref["ndcg@10"]
    ideal = {r["budget"]: r["auc"] for r in rows if r["policy"] == "ideal"}
    assert ideal[1.0] >= ideal[0.0]
    again, _ = frequency_sweep([0.0, 1.0], entries, ctx, ctx, 0, "mean-pool-attention")
    assert rows == again


def test_sweep_rejects_unsorted_budgets(ctx):
    with pytest.raises(SimError):
        frequency_sweep([0.5, 0.1], [SweepEntry("never", "never")], ctx, ctx, 0, "x")
