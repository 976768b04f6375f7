"""Mis-recommendation detector: self-labeled dataset, training and the MRS score."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernel as K
from .data import StepSet
from .generator import ModelBundle, classify_arrays, iterate_minibatches
from .kernel import ParamStore, Rng, Tensor
from .models import hard_decision, pack_sequences

DEFAULT_LAGS = (0, 1, 2, 4, 8, 16)
MRD_TSV_HEADER = ["current_seq", "stale_seq", "lag", "label", "uncertainty"]


class MrdError(ValueError):
    pass


@dataclass(frozen=True)
class MrdSample:
    current: tuple[int, ...]
    stale: tuple[int, ...]
    lag: int
    label: int
    uncertainty: float | None = None
    user: int = -1
    item: int = -1
    y: int = -1


@dataclass
class MrdDataset:
    """Columnar MRD samples; sequences are stored once in ``seqs`` and referenced by index."""

    seqs: list[tuple[int, ...]]
    cur: np.ndarray
    stale: np.ndarray
    lag: np.ndarray
    label: np.ndarray
    user: np.ndarray
    item: np.ndarray
    y: np.ndarray
    prev_seqs: list[tuple[int, ...]] = field(default_factory=list)  # s_{t-1} for every entry of ``seqs``
    uncertainty: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.label)

    def __iter__(self) -> Iterator[MrdSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> MrdSample:
        u = None if self.uncertainty is None else float(self.uncertainty[i])
        return MrdSample(self.seqs[self.cur[i]], self.seqs[self.stale[i]], int(self.lag[i]), int(self.label[i]),
                         u, int(self.user[i]), int(self.item[i]), int(self.y[i]))

    def subset(self, idx) -> "MrdDataset":
        u = None if self.uncertainty is None else self.uncertainty[idx]
        return MrdDataset(self.seqs, self.cur[idx], self.stale[idx], self.lag[idx], self.label[idx],
                          self.user[idx], self.item[idx], self.y[idx], self.prev_seqs, u)

    def class_counts(self) -> tuple[int, int]:
        pos = int(self.label.sum())
        return len(self) - pos, pos

    def write_tsv(self, path: str | Path) -> None:
        """Tab-separated: comma-joined current/stale sequences, lag, label, uncertainty (blank if absent)."""
        with Path(path).open("w") as fh:
            fh.write("\t".join(MRD_TSV_HEADER) + "\n")
            for i in range(len(self)):
                u = "" if self.uncertainty is None else f"{float(self.uncertainty[i]):.9g}"
                fh.write(",".join(map(str, self.seqs[self.cur[i]])) + "\t"
                         + ",".join(map(str, self.seqs[self.stale[i]])) + "\t"
                         + f"{int(self.lag[i])}\t{int(self.label[i])}\t{u}\n")


def read_mrd_tsv(path: str | Path) -> list[MrdSample]:
    out = []
    with Path(path).open() as fh:
        header = next(fh).rstrip("\n").split("\t")
        if header != MRD_TSV_HEADER:
            raise MrdError(f"{path}: unexpected header {header}")
        for line in fh:
            cur, stale, lag, label, u = line.rstrip("\n").split("\t")
            out.append(MrdSample(tuple(int(x) for x in cur.split(",")), tuple(int(x) for x in stale.split(",")),
                                 int(lag), int(label), float(u) if u else None))
    return out


def _lag_offsets(k: int, lags: Sequence[int] | str) -> list[int]:
    if lags == "all":
        return list(range(k + 1))
    return sorted({min(int(l), k) for l in lags})


def build_mrd_dataset(sessions: Sequence[StepSet], bundle: ModelBundle,
                      lags: Sequence[int] | str = DEFAULT_LAGS) -> MrdDataset:
    """Label every (anchor step, stale step, candidate) by whether stale parameters predict it correctly.

    Lags count steps within a user's session and are capped at the anchor's
    position, so lag 0 (fresh parameters) is always present.
    """
    if not bundle.trained:
        raise MrdError("build_mrd_dataset: model bundle is not trained")
    seqs: list[tuple[int, ...]] = []
    prev: list[tuple[int, ...]] = []
    seq_base = []
    for s in sessions:
        seq_base.append(len(seqs))
        seqs.extend(s.prefixes)
        prev.extend(previous_prefixes(s.prefixes))
    if not seqs:
        return MrdDataset(seqs, *(np.zeros(0, dtype=np.int64) for _ in range(7)), prev_seqs=prev)
    cfg = bundle.cfg
    packed = pack_sequences(seqs, cfg.max_len, cfg.vocab_size)
    weights, biases = bundle.generate_arrays(packed)

    cols = {k: [] for k in ("cur", "stale", "lag", "user", "item", "y")}
    feats_rows = []
    for base, s in zip(seq_base, sessions):
        n_c = s.candidates.shape[1]
        x = bundle.features_array(packed.take(slice(base, base + len(s.steps))), s.candidates)
        feats_rows.append(x)
        for k in range(len(s.steps)):
            for lag in _lag_offsets(k, lags):
                cols["cur"].append(np.full(n_c, base + k))
                cols["stale"].append(np.full(n_c, base + k - lag))
                cols["lag"].append(np.full(n_c, s.steps[k] - s.steps[k - lag]))
                cols["user"].append(np.full(n_c, s.user))
                cols["item"].append(s.candidates[k])
                cols["y"].append(s.labels[k].astype(np.int64))
    arr = {k: np.concatenate(v).astype(np.int64) for k, v in cols.items()}
    feats = np.concatenate([f.reshape(-1, f.shape[-1]) for f in feats_rows])
    # row of (cur, candidate) inside ``feats``: sessions are laid out step-major, candidate-minor
    cand_pos = _candidate_positions(sessions, seq_base, arr)
    probs = np.empty(len(arr["cur"]))
    chunk = 8192
    for s in range(0, len(probs), chunk):
        sl = slice(s, s + chunk)
        st = arr["stale"][sl]
        probs[sl] = classify_arrays(feats[cand_pos[sl]], [w[st] for w in weights], [b[st] for b in biases])
    label = ((probs >= 0.5).astype(np.int64) == arr["y"]).astype(np.int64)
    return MrdDataset(seqs, arr["cur"], arr["stale"], arr["lag"], label, arr["user"], arr["item"], arr["y"], prev)


def previous_prefixes(prefixes: Sequence[tuple[int, ...]]) -> list[tuple[int, ...]]:
    """Click sequence one step earlier for each prefix of a contiguous session.

    The first prefix has no stored predecessor; it drops its last click
    (or stays itself when it holds a single item).
    """
    out = []
    for k, p in enumerate(prefixes):
        if k > 0:
            out.append(prefixes[k - 1])
        else:
            out.append(p[:-1] if len(p) > 1 else p)
    return out


def _candidate_positions(sessions, seq_base, arr) -> np.ndarray:
    n_c = sessions[0].candidates.shape[1] if sessions else 0
    if any(s.candidates.shape[1] != n_c for s in sessions):
        raise MrdError("all sessions must share the candidate-set width")
    # feats rows are ordered by sequence index then candidate, matching seq_base layout
    slot = np.tile(np.arange(n_c), len(arr["cur"]) // max(n_c, 1))
    return arr["cur"] * n_c + slot


def recompute_label(bundle: ModelBundle, sample: MrdSample) -> int:
    """Independent single-sample relabeling via ``predict_ctr``."""
    from .models import Interaction, predict_ctr
    dyn = bundle.generate_params(sample.stale)
    p = predict_ctr(bundle.params.bind(()), bundle.cfg, Interaction(sample.user, sample.item, sample.current, sample.y), dyn)
    return int(hard_decision(p) == sample.y)


def balance(ds: MrdDataset, ratio: float, rng: Rng) -> MrdDataset:
    """Downsample the majority class to at most ``ratio`` times the minority."""
    neg, pos = ds.class_counts()
    if min(neg, pos) == 0:
        return ds
    major = 1 if pos > neg else 0
    minor_n = min(neg, pos)
    idx_major = np.flatnonzero(ds.label == major)
    keep_n = min(len(idx_major), int(ratio * minor_n))
    kept = np.sort(rng.choice(idx_major, size=keep_n, replace=False))
    idx = np.sort(np.concatenate([np.flatnonzero(ds.label != major), kept]))
    return ds.subset(idx)


# ---------------------------------------------------------------- detector

@dataclass
class MrdConfig:
    hidden: int = 32
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    balance_ratio: float = 3.0


class MrdDetector:
    """Concat(enc(s_t), enc(s_t'), [u]) -> FC -> relu -> FC -> sigmoid.

    Sequence encodings come from the frozen backbone encoder; ``u`` is divided
    by a stored scale (the training-set mean) before entering the network.
    """

    def __init__(self, params: ParamStore, dim: int, with_uncertainty: bool, trained: bool = False):
        self.params = params
        self.dim = dim
        self.with_uncertainty = with_uncertainty
        self.trained = trained
        self.loss_history: list[float] = []

    @property
    def in_dim(self) -> int:
        return 2 * self.dim + (1 if self.with_uncertainty else 0)

    @staticmethod
    def initialize(dim: int, with_uncertainty: bool, hidden: int = 32, seed: int = 0,
                   zero: bool = False) -> "MrdDetector":
        rng = Rng([seed, 31])
        in_dim = 2 * dim + (1 if with_uncertainty else 0)
        store = ParamStore()
        if zero:
            store.add("mrd.w1", np.zeros((in_dim, hidden)))
            store.add("mrd.w2", np.zeros((hidden, 1)))
        else:
            store.add("mrd.w1", rng.normal((in_dim, hidden)) * math.sqrt(2.0 / in_dim))
            store.add("mrd.w2", rng.normal((hidden, 1)) * math.sqrt(1.0 / hidden))
        store.add("mrd.b1", np.zeros(hidden))
        store.add("mrd.b2", np.zeros(1))
        store.add("mrd.u_scale", np.ones(1))
        return MrdDetector(store, dim, with_uncertainty)

    def trainable(self) -> list[str]:
        return ["mrd.b1", "mrd.b2", "mrd.w1", "mrd.w2"]

    def inputs(self, e_cur: np.ndarray, e_stale: np.ndarray, u: np.ndarray | None) -> np.ndarray:
        parts = [e_cur, e_stale]
        if self.with_uncertainty:
            if u is None:
                raise MrdError("detector was trained with uncertainty; u is required")
            parts.append(np.asarray(u, dtype=np.float64).reshape(-1, 1) / self.params["mrd.u_scale"][0])
        return np.concatenate(parts, axis=1)

    def score_array(self, e_cur: np.ndarray, e_stale: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        x = self.inputs(e_cur, e_stale, u)
        with K.no_grad():
            logits = mrd_logits(self.params.bind(()), Tensor(x))
        return K._stable_sigmoid(logits.data)


def mrd_logits(P, x: Tensor) -> Tensor:
    h = K.relu(K.linear(x, P["mrd.w1"], P["mrd.b1"]))
    out = K.linear(h, P["mrd.w2"], P["mrd.b2"])
    return K.reshape(out, (x.shape[0],))


def mrd_loss(P, x: Tensor, labels: np.ndarray) -> Tensor:
    return K.reduce_mean(K.bce_with_logits(mrd_logits(P, x), labels))


def train_mrd(samples: MrdDataset, bundle: ModelBundle, with_uncertainty: bool, cfg: MrdConfig | None = None,
              encodings: np.ndarray | None = None) -> MrdDetector:
    """Fit the detector on (current, stale[, u]) -> correctness labels."""
    cfg = cfg or MrdConfig()
    neg, pos = samples.class_counts()
    if neg == 0 or pos == 0:
        raise MrdError(f"train_mrd: need both classes, got {neg} incorrect / {pos} correct samples")
    if with_uncertainty and samples.uncertainty is None:
        raise MrdError("train_mrd: uncertainty requested but samples carry none")
    det = MrdDetector.initialize(bundle.cfg.dim, with_uncertainty, cfg.hidden, cfg.seed)
    if with_uncertainty:
        det.params.params["mrd.u_scale"][0] = max(float(np.mean(samples.uncertainty)), 1e-12)
    enc = encodings if encodings is not None else bundle.encode_array(
        pack_sequences(samples.seqs, bundle.cfg.max_len, bundle.cfg.vocab_size))
    x_all = det.inputs(enc[samples.cur], enc[samples.stale], samples.uncertainty)
    y_all = samples.label.astype(np.float64)
    names = det.trainable()
    opt = K.make_optimizer(cfg.optimizer, det.params, cfg.lr)
    rng = Rng([cfg.seed, 37])
    graph = lambda P, x, y: mrd_loss(P, x, y)
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in iterate_minibatches(len(y_all), cfg.batch_size, rng):
            det.params.zero_grad()
            (loss,) = K.forward_backward(graph, (Tensor(x_all[idx]), y_all[idx]), det.params, names)
            opt.step(names)
            total += float(loss.data) * len(idx)
        det.loss_history.append(total / len(y_all))
    det.params.zero_grad()
    det.trained = True
    return det


def mrs(s_t: Sequence[int], s_last_request: Sequence[int], u: float | None, detector: MrdDetector,
        bundle: ModelBundle) -> float:
    """Detector probability that the device's current parameters recommend correctly."""
    packed = pack_sequences([s_t, s_last_request], bundle.cfg.max_len, bundle.cfg.vocab_size)
    enc = bundle.encode_array(packed)
    uu = None if u is None else np.array([u])
    if detector.with_uncertainty and u is None:
        raise MrdError("detector was trained with uncertainty; u is required")
    return float(detector.score_array(enc[:1], enc[1:], uu if detector.with_uncertainty else None)[0])
