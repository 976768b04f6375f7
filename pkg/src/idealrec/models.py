"""Sequential-recommendation backbone and the dynamic two-layer classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernel as K
from .kernel import Rng, Tensor

ENCODERS = ("mean-pool-attention", "recurrent")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    dim: int = 32
    encoder: str = "mean-pool-attention"
    max_len: int = 30

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(N_in, N_out) of each dynamic classifier layer: N -> N -> 1."""
        return [(self.dim, self.dim), (self.dim, 1)]


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    seq: tuple[int, ...]
    label: int


@dataclass
class DynamicParams:
    """Per-layer weights K^(n) and biases; leading batch axis when ``batched``."""

    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def batched(self) -> bool:
        return self.weights[0].data.ndim == 3

    def as_batch(self) -> "DynamicParams":
        if self.batched:
            return self
        return DynamicParams(
            [K.reshape(w, (1,) + w.shape) for w in self.weights],
            [K.reshape(b, (1,) + b.shape) for b in self.biases],
        )

    def row(self, i: int) -> "DynamicParams":
        return DynamicParams([Tensor(w.data[i]) for w in self.weights], [Tensor(b.data[i]) for b in self.biases])

    def check(self, cfg: BackboneConfig) -> None:
        dims = cfg.layer_dims
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise K.ShapeError(f"dynamic params: expected {len(dims)} layers, got {len(self.weights)}")
        for n, ((nin, nout), w, b) in enumerate(zip(dims, self.weights, self.biases)):
            if w.shape[-2:] != (nin, nout) or b.shape[-1:] != (nout,):
                raise K.ShapeError(
                    f"dynamic layer {n}: expected K {nin}x{nout} and bias {nout}, got {w.shape} and {b.shape}"
                )

    @staticmethod
    def zeros(cfg: BackboneConfig) -> "DynamicParams":
        return DynamicParams(
            [Tensor(np.zeros((i, o))) for i, o in cfg.layer_dims],
            [Tensor(np.zeros(o)) for _, o in cfg.layer_dims],
        )


@dataclass
class SeqBatch:
    ids: np.ndarray   # [B, L] int64, left-padded so the most recent item sits at L-1
    mask: np.ndarray  # [B, L] float64

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, idx) -> "SeqBatch":
        return SeqBatch(self.ids[idx], self.mask[idx])


def pack_sequences(seqs: Sequence[Sequence[int]], max_len: int, vocab_size: int | None = None) -> SeqBatch:
    """Left-pad sequences to ``max_len``, keeping only the most recent ``max_len`` items."""
    ids = np.zeros((len(seqs), max_len), dtype=np.int64)
    mask = np.zeros((len(seqs), max_len))
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise ValueError(f"sequence {i} is empty")
        tail = list(s)[-max_len:]
        if vocab_size is not None and (min(tail) < 0 or max(tail) >= vocab_size):
            raise IndexError(f"sequence {i}: item id outside vocabulary of size {vocab_size}")
        ids[i, max_len - len(tail):] = tail
        mask[i, max_len - len(tail):] = 1.0
    return SeqBatch(ids, mask)


def truncate(seq: Sequence[int], max_len: int) -> tuple[int, ...]:
    return tuple(seq)[-max_len:]


# ---------------------------------------------------------------- init

def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in)


def init_encoder(store: K.ParamStore, prefix: str, cfg: BackboneConfig, rng: Rng) -> None:
    n = cfg.dim
    store.add(prefix + "item_emb", rng.normal((cfg.vocab_size, n)) * 0.1)
    if cfg.encoder == "mean-pool-attention":
        store.add(prefix + "enc.w", _glorot(rng, n, n))
        store.add(prefix + "enc.b", np.zeros(n))
    else:
        for gate in ("z", "r", "h"):
            store.add(prefix + f"gru.w{gate}", _glorot(rng, n, n))
            store.add(prefix + f"gru.u{gate}", _glorot(rng, n, n))
            store.add(prefix + f"gru.b{gate}", np.zeros(n))


def init_backbone(store: K.ParamStore, cfg: BackboneConfig, rng: Rng, prefix: str = "bb.") -> None:
    init_encoder(store, prefix, cfg, rng)
    store.add(prefix + "feat.w", _glorot(rng, 2 * cfg.dim, cfg.dim))
    store.add(prefix + "feat.b", np.zeros(cfg.dim))


# ---------------------------------------------------------------- forward

def seq_repr(P: Mapping[str, Tensor], prefix: str, cfg: BackboneConfig, batch: SeqBatch,
             query: Tensor | None = None) -> Tensor:
    """Sequence representation [B, N].

    Under the attention encoder, ``query`` (a candidate embedding [B, N])
    gates each history item by sigmoid(<e_l, query>); without a query all
    gates are 1 and this is a plain masked mean.
    """
    emb = K.embedding(P[prefix + "item_emb"], batch.ids)
    if cfg.encoder == "mean-pool-attention":
        weights = None
        if query is not None:
            b, n = query.shape
            scores = K.reshape(K.matmul(emb, K.reshape(query, (b, n, 1))), (b, emb.shape[1]))
            weights = K.sigmoid(scores)
        pooled = K.mean_pool(emb, batch.mask, weights)
        return K.linear(pooled, P[prefix + "enc.w"], P[prefix + "enc.b"])
    return _gru(P, prefix, emb, batch.mask, cfg.dim)


def _gru(P, prefix, emb: Tensor, mask: np.ndarray, n: int) -> Tensor:
    b, steps, _ = emb.shape
    h = Tensor(np.zeros((b, n)))
    xz = K.linear(emb, P[prefix + "gru.wz"], P[prefix + "gru.bz"])
    xr = K.linear(emb, P[prefix + "gru.wr"], P[prefix + "gru.br"])
    xh = K.linear(emb, P[prefix + "gru.wh"], P[prefix + "gru.bh"])
    for t in range(steps):
        m = mask[:, t]
        if not m.any():
            continue
        z = K.sigmoid(K.add(K.take_step(xz, t), K.matmul(h, P[prefix + "gru.uz"])))
        r = K.sigmoid(K.add(K.take_step(xr, t), K.matmul(h, P[prefix + "gru.ur"])))
        cand = K.tanh(K.add(K.take_step(xh, t), K.matmul(K.mul(r, h), P[prefix + "gru.uh"])))
        new = K.add(cand, K.mul(z, K.sub(h, cand)))
        if m.all():
            h = new
        else:
            h = K.add(h, K.mul(Tensor(np.repeat(m[:, None], n, axis=1)), K.sub(new, h)))
    return h


def encode_sequence(P, cfg: BackboneConfig, batch: SeqBatch, prefix: str = "bb.") -> Tensor:
    return seq_repr(P, prefix, cfg, batch)


def features(P, cfg: BackboneConfig, batch: SeqBatch, cand: Tensor, prefix: str = "bb.") -> Tensor:
    """Static backbone features of (sequence, candidate embedding) -> [B, N]."""
    return features_from(P, seq_repr(P, prefix, cfg, batch, cand), cand, prefix)


def features_from(P, s: Tensor, cand: Tensor, prefix: str = "bb.") -> Tensor:
    return K.tanh(K.linear(K.concat([s, cand]), P[prefix + "feat.w"], P[prefix + "feat.b"]))


def candidate_embedding(P, items, prefix: str = "bb.") -> Tensor:
    return K.embedding(P[prefix + "item_emb"], np.asarray(items, dtype=np.int64))


def classify_logits(x: Tensor, dyn: DynamicParams) -> Tensor:
    """Two dynamic fully-connected layers, relu between; returns logits.

    ``x`` is [B, N] (one candidate per parameter set) or [B, C, N] (C
    candidates sharing each parameter set). Output is [B] or [B, C].
    """
    dyn = dyn.as_batch()
    single = x.data.ndim == 2
    h = K.reshape(x, (x.shape[0], 1, x.shape[1])) if single else x
    n_layers = len(dyn.weights)
    for n, (w, b) in enumerate(zip(dyn.weights, dyn.biases)):
        h = K.add_bias(K.matmul(h, w), b)
        if n < n_layers - 1:
            h = K.relu(h)
    out = K.reshape(h, h.shape[:2])
    return K.reshape(out, (x.shape[0],)) if single else out


def predict_ctr(P, cfg: BackboneConfig, interaction: Interaction, dyn: DynamicParams) -> float:
    """Click probability of one interaction under the given dynamic classifier."""
    dyn.check(cfg)
    if not 0 <= interaction.item < cfg.vocab_size:
        raise IndexError(f"candidate item {interaction.item} outside vocabulary")
    batch = pack_sequences([interaction.seq], cfg.max_len, cfg.vocab_size)
    with K.no_grad():
        cand = candidate_embedding(P, [interaction.item])
        x = features(P, cfg, batch, cand)
        logit = classify_logits(x, dyn.as_batch())
    return float(K._stable_sigmoid(logit.data)[0])


def hard_decision(probability: float) -> int:
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    return 1 if probability >= 0.5 else 0
