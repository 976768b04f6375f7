"""AUC / UAUC / NDCG@K / HitRate@K and plot-ready CSV emission."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredItem:
    user: int
    score: float
    label: int


def auc_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC; tied (positive, negative) pairs count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise MetricError("auc needs at least one positive and one negative")
    if not np.all(np.isfinite(scores)):
        raise MetricError("auc: non-finite score")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def auc(scored: Sequence[ScoredItem]) -> float:
    return auc_arrays(np.array([s.score for s in scored]), np.array([s.label for s in scored]))


def uauc_arrays(users: np.ndarray, scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[int]]:
    """Unweighted mean of per-user AUC and the list of users excluded for lacking a class."""
    users = np.asarray(users)
    order = np.argsort(users, kind="stable")
    us, starts = np.unique(users[order], return_index=True)
    bounds = list(starts) + [len(order)]
    vals, excluded = [], []
    for k, u in enumerate(us):
        idx = order[bounds[k]:bounds[k + 1]]
        y = labels[idx]
        if y.min() == y.max():
            excluded.append(int(u))
            continue
        vals.append(auc_arrays(scores[idx], y))
    if not vals:
        raise MetricError("uauc: no user has both positive and negative samples")
    return float(np.mean(vals)), excluded


def uauc(scored: Sequence[ScoredItem]) -> float:
    value, _ = uauc_arrays(np.array([s.user for s in scored]), np.array([s.score for s in scored]),
                           np.array([s.label for s in scored]))
    return value


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-ground-truth NDCG: 1/log2(rank+1) inside the top k, else 0."""
    if rank < 1:
        raise MetricError("rank must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hitrate_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise MetricError("rank must be >= 1")
    return int(rank <= k)


def rank_in_candidates(scores: Sequence[float], truth: Sequence[int] | int) -> int:
    """1 + number of negatives scoring >= the ground truth (ties counted against it).

    ``truth`` is either the index of the ground truth or a 0/1 flag per candidate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if isinstance(truth, (int, np.integer)):
        gt = int(truth)
        flags = np.zeros(len(scores), dtype=int)
        flags[gt] = 1
    else:
        flags = np.asarray(truth, dtype=int)
        if flags.sum() != 1:
            raise MetricError(f"expected exactly one ground truth, got {int(flags.sum())}")
        gt = int(np.argmax(flags))
    neg = np.delete(scores, gt)
    return 1 + int((neg >= scores[gt]).sum())


def ranks_batch(scores: np.ndarray, gt_col: int = 0) -> np.ndarray:
    """Pessimistic rank of column ``gt_col`` in every row of a [M, C] score matrix."""
    gt = scores[:, gt_col:gt_col + 1]
    others = np.delete(scores, gt_col, axis=1)
    return 1 + (others >= gt).sum(axis=1)


def ranking_metrics(ranks: np.ndarray, ks: Iterable[int] = (10, 20)) -> dict[str, float]:
    out = {}
    ranks = np.asarray(ranks)
    for k in ks:
        out[f"ndcg@{k}"] = float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)))
        out[f"hr@{k}"] = float(np.mean(ranks <= k))
    return out


# ---------------------------------------------------------------- CSV emission

CURVE_HEADER = ["policy", "backbone", "budget", "realized_freq", "auc", "uauc",
                "ndcg@10", "hr@10", "ndcg@20", "hr@20", "seed"]
REVENUE_HEADER = ["group", "mean_mrs", "auc_fresh", "auc_stale", "revenue"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def emit_curves(rows: Iterable[dict], path: str | Path | None = None) -> str:
    """Curve rows as CSV text sorted by (policy, budget, seed); written to ``path`` if given."""
    rows = sorted(rows, key=lambda r: (r["policy"], float(r["budget"]), int(r["seed"])))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in rows:
        w.writerow([_fmt(r[c]) if c not in ("budget", "realized_freq") else f"{float(r[c]):.6f}"
                    for c in CURVE_HEADER])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def emit_revenue(rows: Iterable[dict], path: str | Path | None = None) -> str:
    rows = sorted(rows, key=lambda r: int(r["group"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REVENUE_HEADER)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REVENUE_HEADER])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
