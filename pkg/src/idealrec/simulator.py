"""Device-cloud replay: per-step request decisions, counterfactual predictions, revenue and sweeps.

Every device starts a replay window with a forced request at its first
step (not a decision). At each later step the policy decides; a request
regenerates the dynamic classifier from the current click sequence.
Predictions with fresh and stale parameters are both recorded so revenue
does not depend on what the policy actually did.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import StepSet
from .generator import ModelBundle, classify_arrays
from .kernel import Rng
from .metrics import auc_arrays, ranking_metrics, ranks_batch, uauc_arrays
from .models import Interaction, pack_sequences, predict_ctr
from .policy import HIGH, Policy, calibrate_threshold, decide_many

STEP_HEADER = ["device", "t", "decision", "mrs", "y", "p_used", "p_fresh", "p_stale"]


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class StepRecord:
    device: int
    t: int
    decision: bool
    mrs: float | None
    y: int
    p_used: float
    p_fresh: float
    p_stale: float
    lof: float | None = None
    svdd: float | None = None


class ReplayContext:
    """Everything about a set of device streams that does not depend on the policy.

    Devices are stored in ascending user id order; streams of unequal
    length are right-padded and masked out by ``valid``.
    """

    def __init__(self, bundle: ModelBundle, sessions: Sequence[StepSet]):
        if not bundle.trained:
            raise SimError("replay: model bundle is not trained")
        if not sessions:
            raise SimError("replay: no device streams")
        sessions = sorted(sessions, key=lambda s: s.user)
        widths = {s.candidates.shape[1] for s in sessions}
        if len(widths) != 1:
            raise SimError("replay: every step needs the same candidate-set width")
        self.bundle = bundle
        self.sessions = sessions
        self.users = np.array([s.user for s in sessions], dtype=np.int64)
        self.n_dev = len(sessions)
        self.T = max(len(s.steps) for s in sessions)
        self.C = widths.pop()
        D, T, C = self.n_dev, self.T, self.C
        self.valid = np.zeros((D, T), dtype=bool)
        self.steps = np.full((D, T), -1, dtype=np.int64)
        self.labels = np.zeros((D, T, C))
        seqs, rows, items = [], [], []
        for d, s in enumerate(sessions):
            n = len(s.steps)
            self.valid[d, :n] = True
            self.steps[d, :n] = s.steps
            self.labels[d, :n] = s.labels
            seqs.extend(s.prefixes)
            rows.extend(d * T + k for k in range(n))
            items.append(s.candidates)
        self.seq_row = np.full((D, T), -1, dtype=np.int64)
        self.seq_row.flat[np.array(rows)] = np.arange(len(rows))
        cfg = bundle.cfg
        packed = pack_sequences(seqs, cfg.max_len, cfg.vocab_size)
        self.prefixes = seqs
        self.enc = bundle.encode_array(packed)
        self.weights, self.biases = bundle.generate_arrays(packed)
        self.feats = bundle.features_array(packed, np.concatenate(items))
        self._p = np.full((D, T, T, C), np.nan)

    def row(self, d, t) -> np.ndarray:
        return self.seq_row[d, t]

    def prev_encodings(self) -> tuple[list[tuple[int, ...]], np.ndarray]:
        from .mrd import previous_prefixes
        prev = []
        for s in self.sessions:
            prev.extend(previous_prefixes(s.prefixes))
        cfg = self.bundle.cfg
        return prev, self.bundle.encode_array(pack_sequences(prev, cfg.max_len, cfg.vocab_size))

    def probs(self, d: np.ndarray, t: np.ndarray, r: np.ndarray) -> np.ndarray:
        """p[(d, t) candidates] under parameters generated at step r; cached, shape [len, C]."""
        out = self._p[d, t, r]
        miss = np.isnan(out[:, 0])
        if miss.any():
            dm, tm, rm = d[miss], t[miss], r[miss]
            x = self.feats[self.seq_row[dm, tm]]
            src = self.seq_row[dm, rm]
            p = classify_arrays(x, [w[src] for w in self.weights], [b[src] for b in self.biases])
            self._p[dm, tm, rm] = p
            out = self._p[d, t, r]
        return out


class MrsScorer:
    """MRS for every (device, t, r <= t) in a context, from a detector and optional u[D, T].

    ``table[d, t, r]`` scores the current sequence at step t against parameters
    generated at step r. With ``relative=True`` the fresh score ``table[d, t, t]``
    is subtracted from each row, so the entry says how much the stale parameters
    lower the predicted chance of a correct recommendation (0 at lag 0). This
    removes the per-step difficulty that the absolute score also carries.
    """

    def __init__(self, ctx: ReplayContext, detector, u: np.ndarray | None = None, relative: bool = False):
        if not detector.trained:
            raise SimError("replay: detector is not trained")
        if detector.with_uncertainty and u is None:
            raise SimError("replay: detector needs uncertainty values")
        D, T = ctx.n_dev, ctx.T
        self.table = np.full((D, T, T), np.nan)
        dd, tt, rr = [], [], []
        for t in range(T):
            for r in range(t + 1):
                ok = np.flatnonzero(ctx.valid[:, t])
                dd.append(ok)
                tt.append(np.full(len(ok), t))
                rr.append(np.full(len(ok), r))
        dd, tt, rr = np.concatenate(dd), np.concatenate(tt), np.concatenate(rr)
        e_cur = ctx.enc[ctx.seq_row[dd, tt]]
        e_old = ctx.enc[ctx.seq_row[dd, rr]]
        uu = u[dd, tt] if detector.with_uncertainty else None
        self.table[dd, tt, rr] = detector.score_array(e_cur, e_old, uu)
        self.relative = relative
        if relative:
            idx = np.arange(T)
            self.table -= self.table[:, idx, idx][:, :, None]

    def at(self, t: int, r: np.ndarray) -> np.ndarray:
        return self.table[np.arange(len(r)), t, r]


@dataclass
class SimReport:
    policy: str
    decisions: int
    requests: int
    metrics: dict[str, float]
    device: np.ndarray      # [M] per decision step
    t: np.ndarray           # [M] stream step
    decision: np.ndarray    # [M] bool
    stale_from: np.ndarray  # [M] local index of the step whose sequence produced the stale params
    mrs: np.ndarray         # [M] (nan without a scorer)
    labels: np.ndarray      # [M, C]
    p_used: np.ndarray
    p_fresh: np.ndarray
    p_stale: np.ndarray

    @property
    def realized_freq(self) -> float:
        return self.requests / self.decisions if self.decisions else 0.0

    def records(self) -> list[StepRecord]:
        out = []
        for i in range(len(self.device)):
            m = None if math.isnan(self.mrs[i]) else float(self.mrs[i])
            for c in range(self.labels.shape[1]):
                out.append(StepRecord(int(self.device[i]), int(self.t[i]), bool(self.decision[i]), m,
                                      int(self.labels[i, c]), float(self.p_used[i, c]),
                                      float(self.p_fresh[i, c]), float(self.p_stale[i, c])))
        return out


def policy_values(policy: Policy, ctx: ReplayContext, scorer: MrsScorer | None,
                  side: dict[str, np.ndarray] | None) -> Callable[[int, np.ndarray], np.ndarray | None]:
    name = policy.feature
    if name is None:
        return lambda t, last: None
    if name == "mrs":
        if scorer is None:
            raise SimError("policy 'mrs' needs a detector scorer")
        return scorer.at
    if side is None or name not in side:
        raise SimError(f"policy {policy.kind!r} needs per-step {name!r} scores")
    arr = side[name]
    return lambda t, last: arr[:, t]


def simulate_decisions(ctx: ReplayContext, policy: Policy, scorer: MrsScorer | None = None,
                       side: dict[str, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run the request loop only; returns (decision[D, T], stale_from[D, T])."""
    D, T = ctx.n_dev, ctx.T
    values = policy_values(policy, ctx, scorer, side)
    last = np.zeros(D, dtype=np.int64)
    dec = np.zeros((D, T), dtype=bool)
    stale = np.zeros((D, T), dtype=np.int64)
    for t in range(1, T):
        v = values(t, last)
        want = decide_many(policy, v, D) & ctx.valid[:, t]
        dec[:, t] = want
        stale[:, t] = last
        last = np.where(want, t, last)
    return dec, stale


def run_replay(ctx: ReplayContext, policy: Policy, name: str | None = None, scorer: MrsScorer | None = None,
               side: dict[str, np.ndarray] | None = None, debug: bool = False) -> SimReport:
    dec, stale = simulate_decisions(ctx, policy, scorer, side)
    mask = ctx.valid.copy()
    mask[:, 0] = False
    d, t = np.nonzero(mask)
    r = stale[d, t]
    p_fresh = ctx.probs(d, t, t)
    p_stale = ctx.probs(d, t, r)
    chosen = dec[d, t]
    p_used = np.where(chosen[:, None], p_fresh, p_stale)
    mrs = scorer.table[d, t, r] if scorer is not None else np.full(len(d), np.nan)
    labels = ctx.labels[d, t]
    rep = SimReport(name or policy.kind, int(mask.sum()), int(chosen.sum()), {}, ctx.users[d], ctx.steps[d, t],
                    chosen, r, mrs, labels, p_used, p_fresh, p_stale)
    rep.metrics = score_predictions(ctx.users[d], labels, p_used)
    if debug:
        verify_state(ctx, rep, d, t)
    return rep


def score_predictions(devices: np.ndarray, labels: np.ndarray, probs: np.ndarray) -> dict[str, float]:
    flat_u = np.repeat(devices, labels.shape[1])
    out = {"auc": auc_arrays(probs.ravel(), labels.ravel())}
    out["uauc"], _ = uauc_arrays(flat_u, probs.ravel(), labels.ravel())
    gt = np.argmax(labels, axis=1)
    if np.all(labels.sum(axis=1) == 1) and np.all(gt == 0):
        out.update(ranking_metrics(ranks_batch(probs, 0)))
    else:
        from .metrics import rank_in_candidates
        out.update(ranking_metrics(np.array([rank_in_candidates(p, l.astype(int)) for p, l in zip(probs, labels)])))
    return out


def verify_state(ctx: ReplayContext, rep: SimReport, d: np.ndarray, t: np.ndarray, n: int = 20) -> None:
    """Recompute a few used predictions from scratch with parameters regenerated from s_last_request."""
    P = ctx.bundle.params.bind(())
    cfg = ctx.bundle.cfg
    for i in np.linspace(0, len(d) - 1, min(n, len(d))).astype(int):
        src = int(t[i]) if rep.decision[i] else int(rep.stale_from[i])
        s = ctx.sessions[int(d[i])]
        dyn = ctx.bundle.generate_params(s.prefixes[src])
        item = int(s.candidates[int(t[i]), 0])
        p = predict_ctr(P, cfg, Interaction(s.user, item, s.prefixes[int(t[i])], 1), dyn)
        if abs(p - rep.p_used[i, 0]) > 1e-9:
            raise SimError(f"device {s.user} step {s.steps[int(t[i])]}: state does not match its last request")


def write_step_log(rep: SimReport, path: str | Path) -> None:
    """One line per (decision step, candidate); columns per STEP_HEADER."""
    lines = ["\t".join(STEP_HEADER)]
    C = rep.labels.shape[1]
    for i in range(len(rep.device)):
        m = "" if math.isnan(rep.mrs[i]) else f"{rep.mrs[i]:.9g}"
        head = f"{rep.device[i]}\t{rep.t[i]}\t{int(rep.decision[i])}\t{m}\t"
        for c in range(C):
            lines.append(head + f"{int(rep.labels[i, c])}\t{rep.p_used[i, c]:.9g}\t"
                                f"{rep.p_fresh[i, c]:.9g}\t{rep.p_stale[i, c]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- revenue

@dataclass
class RevenueResult:
    rows: list[dict]
    skipped: list[int]


def revenue_arrays(devices: np.ndarray, mrs: np.ndarray, labels: np.ndarray, p_fresh: np.ndarray,
                   p_stale: np.ndarray, users_per_group: int = 20) -> RevenueResult:
    """Per-group mean MRS and AUC(fresh) - AUC(stale); groups are consecutive runs of sorted device ids."""
    if users_per_group < 1:
        raise SimError("users_per_group must be >= 1")
    ids = np.unique(devices)
    group_of = {int(u): i // users_per_group for i, u in enumerate(ids)}
    g = np.array([group_of[int(u)] for u in devices], dtype=np.int64)
    rows, skipped = [], []
    for k in range(int(g.max()) + 1 if len(g) else 0):
        sel = g == k
        y = labels[sel].ravel()
        if y.min() == y.max():
            skipped.append(k)
            continue
        a_f = auc_arrays(p_fresh[sel].ravel(), y)
        a_s = auc_arrays(p_stale[sel].ravel(), y)
        m = mrs[sel]
        # fsum keeps the mean independent of record order
        rows.append({"group": k, "mean_mrs": math.fsum(m) / len(m) if not np.isnan(m).any() else float("nan"),
                     "auc_fresh": a_f, "auc_stale": a_s, "revenue": a_f - a_s})
    return RevenueResult(rows, skipped)


def revenue(records: Sequence[StepRecord], users_per_group: int = 20) -> RevenueResult:
    """Revenue from a flat record list (one record per candidate)."""
    if not records:
        return RevenueResult([], [])
    dev = np.array([r.device for r in records])
    mrs = np.array([np.nan if r.mrs is None else r.mrs for r in records])
    y = np.array([[r.y] for r in records], dtype=np.float64)
    pf = np.array([[r.p_fresh] for r in records])
    ps = np.array([[r.p_stale] for r in records])
    return revenue_arrays(dev, mrs, y, pf, ps, users_per_group)


def revenue_report(rep: SimReport, users_per_group: int = 20) -> RevenueResult:
    return revenue_arrays(rep.device, rep.mrs, rep.labels, rep.p_fresh, rep.p_stale, users_per_group)


# ---------------------------------------------------------------- calibration and sweeps

def realized_frequency(ctx: ReplayContext, policy: Policy, scorer=None, side=None) -> float:
    dec, _ = simulate_decisions(ctx, policy, scorer, side)
    n = int(ctx.valid[:, 1:].sum())
    return float(dec.sum()) / n if n else 0.0


def calibrate_mrs(ctx: ReplayContext, scorer: MrsScorer, f: float, iters: int = 40) -> float:
    """Threshold whose closed-loop request frequency on ``ctx`` is closest to ``f``.

    MRS depends on each device's last request, so a plain quantile of
    scores does not hold its frequency once the policy acts. The score
    range gives the bracket; bisection on the replayed frequency refines it.
    """
    if not 0.0 <= f <= 1.0:
        raise SimError("budget must lie in [0, 1]")
    if f == 0.0:
        return -math.inf
    if f == 1.0:
        return math.inf
    vals = scorer.table[~np.isnan(scorer.table)]
    lo, hi = float(vals.min()) - 1e-12, float(vals.max()) + 1e-12
    best_tau, best_err = lo, math.inf
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        freq = realized_frequency(ctx, Policy("mrs", tau=mid), scorer)
        err = abs(freq - f)
        if err < best_err or (err == best_err and mid < best_tau):
            best_tau, best_err = mid, err
        if freq > f:
            hi = mid
        else:
            lo = mid
    return best_tau


def calibrate_static(scores: np.ndarray, valid: np.ndarray, f: float) -> float:
    """High-scores-request threshold from the decision-step scores of a calibration stream."""
    v = valid.copy()
    v[:, 0] = False
    return calibrate_threshold(scores[v], f, HIGH)


@dataclass
class SweepEntry:
    """One curve: ``kind`` is a policy kind; MRS curves carry scorers for both streams."""

    name: str
    kind: str
    cal_scorer: MrsScorer | None = None
    eval_scorer: MrsScorer | None = None


def frequency_sweep(budgets: Sequence[float], entries: Sequence[SweepEntry], cal: ReplayContext,
                    ev: ReplayContext, seed: int, backbone: str,
                    cal_side: dict[str, np.ndarray] | None = None,
                    ev_side: dict[str, np.ndarray] | None = None) -> tuple[list[dict], dict]:
    """One curve row per (entry, budget); thresholds are calibrated on ``cal`` and applied to ``ev``."""
    if list(budgets) != sorted(budgets) or any(not 0.0 <= f <= 1.0 for f in budgets):
        raise SimError("budgets must be sorted and lie in [0, 1]")
    rows, reports = [], {}
    for e in entries:
        for bi, f in enumerate(budgets):
            if e.kind == "random":
                pol = Policy("random", p=f, rng=Rng([seed, 5, bi]))
            elif e.kind == "mrs":
                pol = Policy("mrs", tau=calibrate_mrs(cal, e.cal_scorer, f))
            elif e.kind in ("lof", "svdd"):
                pol = Policy(e.kind, tau=calibrate_static(cal_side[e.kind], cal.valid, f))
            else:
                pol = Policy(e.kind)
            rep = run_replay(ev, pol, e.name, e.eval_scorer, ev_side)
            reports[(e.name, f)] = rep
            rows.append(curve_row(e.name, backbone, f, rep, seed))
    return rows, reports


def curve_row(name: str, backbone: str, budget: float, rep: SimReport, seed: int) -> dict:
    m = rep.metrics
    return {"policy": name, "backbone": backbone, "budget": budget, "realized_freq": rep.realized_freq,
            "auc": m["auc"], "uauc": m["uauc"], "ndcg@10": m["ndcg@10"], "hr@10": m["hr@10"],
            "ndcg@20": m["ndcg@20"], "hr@20": m["hr@20"], "seed": seed}
