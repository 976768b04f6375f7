"""Request policies, budget calibration and the LOF / SVDD drift baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .kernel import Rng

LOW = "low-scores-request"
HIGH = "high-scores-request"

KINDS = ("always", "never", "random", "mrs", "lof", "svdd")
FEATURE_OF = {"mrs": "mrs", "lof": "lof", "svdd": "svdd"}


class PolicyError(ValueError):
    pass


@dataclass
class Policy:
    """kind in KINDS; ``p`` for random, ``tau`` for the threshold kinds."""

    kind: str
    p: float = 0.0
    tau: float = 0.0
    k: int = 10
    rng: Rng | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind == "random":
            if not 0.0 <= self.p <= 1.0:
                raise PolicyError("random policy probability must lie in [0, 1]")
            if self.rng is None:
                self.rng = Rng(0)

    @property
    def feature(self) -> str | None:
        return FEATURE_OF.get(self.kind)

    @property
    def direction(self) -> str:
        return LOW if self.kind == "mrs" else HIGH


def calibrate_threshold(scores: Sequence[float], f: float, direction: str = LOW) -> float:
    """Threshold letting the largest achievable fraction <= f of ``scores`` request.

    Low-scores-request requests when score < tau; high-scores-request when
    score > tau. f = 0 and f = 1 map to -inf / +inf (or the reverse).
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise PolicyError("calibrate_threshold: empty score sample")
    if not 0.0 <= f <= 1.0:
        raise PolicyError("budget must lie in [0, 1]")
    if direction not in (LOW, HIGH):
        raise PolicyError(f"unknown direction {direction!r}")
    n = s.size
    m = int(math.floor(f * n + 1e-9))
    if direction == LOW:
        if m == 0:
            return -math.inf
        return math.inf if m >= n else float(s[m])
    if m == 0:
        return math.inf
    desc = s[::-1]
    return -math.inf if m >= n else float(desc[m])


def decide(policy: Policy, features: Mapping[str, float] | None = None) -> bool:
    kind = policy.kind
    if kind == "always":
        return True
    if kind == "never":
        return False
    if kind == "random":
        return bool(policy.rng.random() < policy.p)
    feats = features or {}
    name = policy.feature
    if name not in feats or feats[name] is None:
        raise PolicyError(f"policy {kind!r} needs feature {name!r}")
    value = float(feats[name])
    return value < policy.tau if kind == "mrs" else value > policy.tau


def decide_many(policy: Policy, values: np.ndarray | None, n: int) -> np.ndarray:
    """Vectorized ``decide`` over ``n`` devices (random draws in device order)."""
    if policy.kind == "always":
        return np.ones(n, dtype=bool)
    if policy.kind == "never":
        return np.zeros(n, dtype=bool)
    if policy.kind == "random":
        return policy.rng.random(n) < policy.p
    if values is None:
        raise PolicyError(f"policy {policy.kind!r} needs feature {policy.feature!r}")
    return values < policy.tau if policy.kind == "mrs" else values > policy.tau


# ---------------------------------------------------------------- LOF

@dataclass
class LofModel:
    reference: np.ndarray
    k: int
    kdist: np.ndarray
    lrd: np.ndarray


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _lrd_from(dists: np.ndarray, nbr: np.ndarray, kdist_ref: np.ndarray) -> np.ndarray:
    reach = np.maximum(kdist_ref[nbr], np.take_along_axis(dists, nbr, axis=1))
    mean_reach = reach.mean(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(mean_reach > 0, 1.0 / np.maximum(mean_reach, 1e-300), np.inf)


def lof_fit(reference: Sequence, k: int) -> LofModel:
    ref = np.asarray([np.asarray(getattr(r, "data", r), dtype=np.float64).ravel() for r in reference])
    if len(ref) < k + 1:
        raise PolicyError(f"LOF needs at least k+1={k + 1} reference points, got {len(ref)}")
    d = _pairwise(ref, ref)
    np.fill_diagonal(d, np.inf)
    nbr = np.argsort(d, axis=1, kind="stable")[:, :k]
    kdist = np.take_along_axis(d, nbr[:, -1:], axis=1)[:, 0]
    lrd = _lrd_from(d, nbr, kdist)
    return LofModel(ref, k, kdist, lrd)


def lof_scores(queries: np.ndarray, model: LofModel) -> np.ndarray:
    """Local outlier factor of each query row against the fitted reference.

    Neighbourhoods where every reach distance is 0 (duplicate points) give
    an infinite density; the ratio of two infinite densities is defined as 1.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d = _pairwise(q, model.reference)
    nbr = np.argsort(d, axis=1, kind="stable")[:, :model.k]
    lrd_q = _lrd_from(d, nbr, model.kdist)
    lrd_n = model.lrd[nbr]
    out = np.empty(len(q))
    for i in range(len(q)):
        if np.isinf(lrd_q[i]):
            out[i] = 1.0 if np.all(np.isinf(lrd_n[i])) else 0.0
        else:
            finite = np.where(np.isinf(lrd_n[i]), np.nan, lrd_n[i])
            out[i] = np.inf if np.isnan(finite).any() else float(finite.mean() / lrd_q[i])
    return out


def lof_score(query, reference: Sequence, k: int) -> float:
    return float(lof_scores(np.asarray(getattr(query, "data", query)).ravel()[None, :], lof_fit(reference, k))[0])


# ---------------------------------------------------------------- SVDD (centroid hypersphere)

@dataclass
class SvddModel:
    center: np.ndarray
    radius: float


def svdd_fit(reference: Sequence, radius_quantile: float = 0.9) -> SvddModel:
    """Hypersphere around the reference mean; radius is a quantile of member distances."""
    ref = np.asarray([np.asarray(getattr(r, "data", r), dtype=np.float64).ravel() for r in reference])
    if len(ref) == 0:
        raise PolicyError("svdd_fit: empty reference")
    if not 0.0 < radius_quantile <= 1.0:
        raise PolicyError("radius_quantile must lie in (0, 1]")
    center = ref.mean(axis=0)
    dist = np.linalg.norm(ref - center, axis=1)
    return SvddModel(center, float(np.quantile(dist, radius_quantile)))


def svdd_scores(queries: np.ndarray, model: SvddModel) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return np.linalg.norm(q - model.center, axis=1) - model.radius


def svdd_score(query, model: SvddModel) -> float:
    return float(svdd_scores(np.asarray(getattr(query, "data", query)).ravel()[None, :], model)[0])
