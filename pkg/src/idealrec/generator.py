"""Cloud-side parameter generator and joint training with the static backbone."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import ParamStore, Rng, Tensor
from .models import (
    BackboneConfig,
    DynamicParams,
    Interaction,
    SeqBatch,
    candidate_embedding,
    classify_logits,
    features,
    features_from,
    init_backbone,
    init_encoder,
    pack_sequences,
    seq_repr,
)

GEN = "gen."
BB = "bb."


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "sgd"
    seed: int = 0


@dataclass
class InteractionBatch:
    seqs: SeqBatch
    items: np.ndarray
    labels: np.ndarray
    users: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def take(self, idx) -> "InteractionBatch":
        return InteractionBatch(self.seqs.take(idx), self.items[idx], self.labels[idx], self.users[idx])

    @staticmethod
    def from_interactions(rows: list[Interaction], cfg: BackboneConfig) -> "InteractionBatch":
        for r in rows:
            if not 0 <= r.item < cfg.vocab_size:
                raise IndexError(f"candidate item {r.item} outside vocabulary")
        return InteractionBatch(
            pack_sequences([r.seq for r in rows], cfg.max_len, cfg.vocab_size),
            np.array([r.item for r in rows], dtype=np.int64),
            np.array([r.label for r in rows], dtype=np.float64),
            np.array([r.user for r in rows], dtype=np.int64),
        )


def init_generator(store: ParamStore, cfg: BackboneConfig, rng: Rng) -> None:
    """Heads start as a random base layer plus a sequence-dependent offset.

    Hidden-layer heads get a unit-normal bias on their weight block (scaled
    to 1/sqrt(N_in) variance at generation); the last head's bias is zero, so
    initial logits stay near zero. All-zero bases would put the product of
    generated layers at a saddle where training stalls.
    """
    init_encoder(store, GEN, cfg, rng)
    dims = cfg.layer_dims
    for n, (nin, nout) in enumerate(dims):
        width = nin * nout + nout
        store.add(f"{GEN}head{n}.w", rng.normal((cfg.dim, width)) * math.sqrt(1.0 / cfg.dim))
        bias = np.zeros(width)
        if n < len(dims) - 1:
            bias[:nin * nout] = rng.normal(nin * nout)
        store.add(f"{GEN}head{n}.b", bias)


def generate_batch(P, cfg: BackboneConfig, seqs: SeqBatch) -> DynamicParams:
    """Dynamic classifier parameters for every sequence in the batch.

    Head outputs are scaled by 1/sqrt(N_in) so a freshly initialized
    generator yields classifiers with small logits.
    """
    e = seq_repr(P, GEN, cfg, seqs)
    b = e.shape[0]
    weights, biases = [], []
    for n, (nin, nout) in enumerate(cfg.layer_dims):
        out = K.scale(K.linear(e, P[f"{GEN}head{n}.w"], P[f"{GEN}head{n}.b"]), 1.0 / math.sqrt(nin))
        weights.append(K.reshape(K.slice_last(out, 0, nin * nout), (b, nin, nout)))
        biases.append(K.slice_last(out, nin * nout, nin * nout + nout))
    return DynamicParams(weights, biases)


class ModelBundle:
    """Static backbone + generator parameters (one store, ``bb.``/``gen.`` prefixes)."""

    def __init__(self, cfg: BackboneConfig, params: ParamStore, trained: bool = False):
        self.cfg = cfg
        self.params = params
        self.trained = trained
        self.loss_history: list[float] = []

    @staticmethod
    def initialize(cfg: BackboneConfig, seed: int) -> "ModelBundle":
        store = ParamStore()
        rng = Rng(seed)
        init_backbone(store, cfg, rng.child(1), BB)
        init_generator(store, cfg, rng.child(2))
        return ModelBundle(cfg, store)

    def generate_params(self, seq) -> DynamicParams:
        """Dynamic parameters generated from one click sequence."""
        batch = pack_sequences([seq], self.cfg.max_len, self.cfg.vocab_size)
        with K.no_grad():
            dyn = generate_batch(self.params.bind(()), self.cfg, batch)
        return dyn.row(0)

    def generate_arrays(self, seqs: SeqBatch, chunk: int = 4096) -> tuple[list[np.ndarray], list[np.ndarray]]:
        ws, bs = [], []
        P = self.params.bind(())
        with K.no_grad():
            for s in range(0, len(seqs), chunk):
                d = generate_batch(P, self.cfg, seqs.take(slice(s, s + chunk)))
                ws.append([w.data for w in d.weights])
                bs.append([b.data for b in d.biases])
        n = len(self.cfg.layer_dims)
        return ([np.concatenate([w[i] for w in ws]) for i in range(n)],
                [np.concatenate([b[i] for b in bs]) for i in range(n)])

    def features_array(self, seqs: SeqBatch, items: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Static features for (sequence, candidate) rows; items may be [B] or [B, C]."""
        P = self.params.bind(())
        out = []
        if items.ndim == 2:
            chunk = max(1, min(chunk, 16384 // items.shape[1]))
        with K.no_grad():
            for s in range(0, len(seqs), chunk):
                sb = seqs.take(slice(s, s + chunk))
                it = items[s:s + chunk]
                if it.ndim == 1:
                    out.append(features(P, self.cfg, sb, candidate_embedding(P, it)).data)
                elif self.cfg.encoder == "recurrent":
                    # the recurrent encoder ignores the candidate, so encode each sequence once
                    c = it.shape[1]
                    s_rep = K.Tensor(np.repeat(seq_repr(P, BB, self.cfg, sb).data, c, axis=0))
                    x = features_from(P, s_rep, candidate_embedding(P, it.reshape(-1))).data
                    out.append(x.reshape(len(sb), c, -1))
                else:
                    c = it.shape[1]
                    rep = SeqBatch(np.repeat(sb.ids, c, axis=0), np.repeat(sb.mask, c, axis=0))
                    x = features(P, self.cfg, rep, candidate_embedding(P, it.reshape(-1))).data
                    out.append(x.reshape(len(sb), c, -1))
        return np.concatenate(out)

    def encode_array(self, seqs: SeqBatch, chunk: int = 4096) -> np.ndarray:
        P = self.params.bind(())
        with K.no_grad():
            return np.concatenate([
                seq_repr(P, BB, self.cfg, seqs.take(slice(s, s + chunk))).data
                for s in range(0, len(seqs), chunk)
            ])


def classify_arrays(x: np.ndarray, weights: list[np.ndarray], biases: list[np.ndarray]) -> np.ndarray:
    """Probabilities of the dynamic classifier, pure numpy (no tape)."""
    dyn = DynamicParams([Tensor(w) for w in weights], [Tensor(b) for b in biases])
    with K.no_grad():
        logits = classify_logits(Tensor(x), dyn)
    return K._stable_sigmoid(logits.data)


def binary_cross_entropy(y: int, p: float) -> float:
    p = min(max(p, 1e-7), 1.0 - 1e-7)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def rec_logits(P, cfg: BackboneConfig, batch: InteractionBatch) -> Tensor:
    """Logits with parameters generated from each row's own sequence."""
    dyn = generate_batch(P, cfg, batch.seqs)
    x = features(P, cfg, batch.seqs, candidate_embedding(P, batch.items))
    return classify_logits(x, dyn)


def joint_loss(P, cfg: BackboneConfig, batch: InteractionBatch) -> Tensor:
    """Mean cross-entropy of the generated-parameter model over a batch."""
    logits = rec_logits(P, cfg, batch)
    return K.reduce_mean(K.bce_with_logits(logits, batch.labels))


def iterate_minibatches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train_joint(history: list[Interaction] | InteractionBatch, cfg: BackboneConfig, tc: TrainConfig,
                bundle: ModelBundle | None = None) -> ModelBundle:
    """Jointly fit the static backbone and the generator on labeled history."""
    data = history if isinstance(history, InteractionBatch) else (
        InteractionBatch.from_interactions(history, cfg) if history else None)
    if data is None or len(data) == 0:
        raise ValueError("train_joint: empty history")
    bundle = bundle or ModelBundle.initialize(cfg, tc.seed)
    store = bundle.params
    names = store.names()
    opt = K.make_optimizer(tc.optimizer, store, tc.lr)
    rng = Rng([tc.seed, 17])
    graph = lambda P, b: joint_loss(P, cfg, b)
    for _ in range(tc.epochs):
        total = 0.0
        for idx in iterate_minibatches(len(data), tc.batch_size, rng):
            store.zero_grad()
            (loss,) = K.forward_backward(graph, (data.take(idx),), store, names)
            opt.step(names)
            total += float(loss.data) * len(idx)
        bundle.loss_history.append(total / len(data))
    store.zero_grad()
    bundle.trained = True
    return bundle
