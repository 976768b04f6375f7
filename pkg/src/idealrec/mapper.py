"""Distribution mapper: Gaussian prior/posterior over click sequences, next-item head, uncertainty."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernel as K
from .generator import BB, ModelBundle, iterate_minibatches
from .kernel import ParamStore, Rng, Tensor
from .models import DynamicParams, SeqBatch, candidate_embedding, classify_logits, features, pack_sequences

SIGMA_MIN = 1e-4
LOSS_KINDS = ("classification", "regression")
UNCERTAINTY_KINDS = ("next-item", "mrs")
STRATEGIES = {"cl+nu": ("classification", "next-item"), "cl+mu": ("classification", "mrs"),
              "rl+nu": ("regression", "next-item"), "rl+mu": ("regression", "mrs")}


class DmError(ValueError):
    pass


@dataclass
class GaussianLatent:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise K.ShapeError(f"GaussianLatent: mu {self.mu.shape} vs sigma {self.sigma.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class DmConfig:
    latent: int = 64
    hidden: int = 32
    beta: float = 0.1
    loss: str = "classification"
    uncertainty: str = "next-item"
    samples: int = 10
    head: str = "tanh"  # "linear" drops the nonlinearity in predict_next_item
    epochs: int = 3
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise DmError("beta must be >= 0")
        if self.samples < 1:
            raise DmError("sampling count n must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise DmError(f"unknown loss kind {self.loss!r}")
        if self.uncertainty not in UNCERTAINTY_KINDS:
            raise DmError(f"unknown uncertainty kind {self.uncertainty!r}")
        if self.head not in ("tanh", "linear"):
            raise DmError(f"unknown head activation {self.head!r}")

    @staticmethod
    def from_strategy(strategy: str, **kw) -> "DmConfig":
        if strategy not in STRATEGIES:
            raise DmError(f"unknown strategy {strategy!r}; expected one of {sorted(STRATEGIES)}")
        loss, unc = STRATEGIES[strategy]
        return DmConfig(loss=loss, uncertainty=unc, **kw)


class DmModel:
    """Mapper parameters (``dm.`` prefix) plus a reference to the frozen backbone."""

    def __init__(self, params: ParamStore, cfg: DmConfig, bundle: ModelBundle, trained: bool = False):
        self.params = params
        self.cfg = cfg
        self.bundle = bundle
        self.trained = trained
        self.loss_history: list[tuple[float, float, float]] = []

    @property
    def dim(self) -> int:
        return self.bundle.cfg.dim

    def bind(self, trainable=()) -> dict[str, Tensor]:
        P = self.bundle.params.bind(())
        P.update(self.params.bind(trainable))
        return P


def init_dm(bundle: ModelBundle, cfg: DmConfig, seed: int = 0, zero: bool = False) -> DmModel:
    n, d, h = bundle.cfg.dim, cfg.latent, cfg.hidden
    rng = Rng([seed, 41])
    store = ParamStore()

    def w(name, fan_in, fan_out):
        store.add(name, np.zeros((fan_in, fan_out)) if zero else rng.normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in))

    for net, in_dim in (("prior", n), ("post", 2 * n)):
        w(f"dm.{net}.w", in_dim, h)
        store.add(f"dm.{net}.b", np.zeros(h))
        w(f"dm.{net}.mu.w", h, d)
        store.add(f"dm.{net}.mu.b", np.zeros(d))
        w(f"dm.{net}.sig.w", h, d)
        store.add(f"dm.{net}.sig.b", np.zeros(d))
    w("dm.npn.wz", d, h)
    w("dm.npn.we", n, h)
    store.add("dm.npn.b", np.zeros(h))
    w("dm.npn.out.w", h, n)
    store.add("dm.npn.out.b", np.zeros(n))
    return DmModel(store, cfg, bundle)


# ---------------------------------------------------------------- graph pieces

def _gaussian_head(P, net: str, x: Tensor) -> tuple[Tensor, Tensor]:
    h = K.tanh(K.linear(x, P[f"dm.{net}.w"], P[f"dm.{net}.b"]))
    mu = K.linear(h, P[f"dm.{net}.mu.w"], P[f"dm.{net}.mu.b"])
    pre = K.linear(h, P[f"dm.{net}.sig.w"], P[f"dm.{net}.sig.b"])
    sigma = K.add(K.softplus(pre), Tensor(np.full(pre.shape, SIGMA_MIN)))
    return mu, sigma


def prior_graph(P, e: Tensor) -> tuple[Tensor, Tensor]:
    return _gaussian_head(P, "prior", e)


def posterior_graph(P, e: Tensor, r: Tensor) -> tuple[Tensor, Tensor]:
    return _gaussian_head(P, "post", K.concat([e, r]))


def next_item_graph(P, e: Tensor, z: Tensor, head: str = "tanh") -> Tensor:
    pre = K.add_bias(K.add(K.matmul(z, P["dm.npn.wz"]), K.matmul(e, P["dm.npn.we"])), P["dm.npn.b"])
    h = K.tanh(pre) if head == "tanh" else pre
    return K.linear(h, P["dm.npn.out.w"], P["dm.npn.out.b"])


def kl_graph(mu_q: Tensor, s_q: Tensor, mu_p: Tensor, s_p: Tensor) -> Tensor:
    """Per-row KL(q || p) of diagonal Gaussians, shape [B]."""
    diff = K.sub(mu_q, mu_p)
    num = K.add(K.mul(s_q, s_q), K.mul(diff, diff))
    ratio = K.div(num, K.scale(K.mul(s_p, s_p), 2.0))
    per = K.add(K.sub(K.log(s_p), K.log(s_q)), ratio)
    return K.sub(K.reduce_sum(per, axis=-1), Tensor(np.full(mu_q.shape[0], 0.5 * mu_q.shape[-1])))


def kl_diag_gaussian(q: GaussianLatent, p: GaussianLatent) -> float:
    if q.mu.shape != p.mu.shape:
        raise K.ShapeError(f"kl_diag_gaussian: dimension mismatch {q.mu.shape} vs {p.mu.shape}")
    if np.any(q.sigma <= 0) or np.any(p.sigma <= 0):
        raise DmError("kl_diag_gaussian: sigma must be positive")
    return float(np.sum(np.log(p.sigma / q.sigma)
                        + (q.sigma ** 2 + (q.mu - p.mu) ** 2) / (2.0 * p.sigma ** 2) - 0.5))


# ---------------------------------------------------------------- single-sequence API

def _encode(dm: DmModel, seqs: SeqBatch) -> np.ndarray:
    return dm.bundle.encode_array(seqs)


def _pack(dm: DmModel, seqs) -> SeqBatch:
    c = dm.bundle.cfg
    return pack_sequences(seqs, c.max_len, c.vocab_size)


def prior(seq: Sequence[int], dm: DmModel) -> GaussianLatent:
    e = _encode(dm, _pack(dm, [seq]))
    with K.no_grad():
        mu, s = prior_graph(dm.bind(), Tensor(e))
    return GaussianLatent(mu.data[0], s.data[0])


def posterior(seq: Sequence[int], next_item_embedding, dm: DmModel) -> GaussianLatent:
    r = np.asarray(getattr(next_item_embedding, "data", next_item_embedding), dtype=np.float64).reshape(1, -1)
    if r.shape[1] != dm.dim:
        raise K.ShapeError(f"posterior: next-item embedding has {r.shape[1]} dims, expected {dm.dim}")
    e = _encode(dm, _pack(dm, [seq]))
    with K.no_grad():
        mu, s = posterior_graph(dm.bind(), Tensor(e), Tensor(r))
    return GaussianLatent(mu.data[0], s.data[0])


def predict_next_item(seq: Sequence[int], z, dm: DmModel) -> np.ndarray:
    z = np.asarray(getattr(z, "data", z), dtype=np.float64).reshape(-1)
    if z.shape[0] != dm.cfg.latent:
        raise K.ShapeError(f"predict_next_item: z has {z.shape[0]} dims, expected {dm.cfg.latent}")
    e = _encode(dm, _pack(dm, [seq]))
    with K.no_grad():
        r = next_item_graph(dm.bind(), Tensor(e), Tensor(z[None, :]), dm.cfg.head)
    return r.data[0]


def sample_variance(samples: np.ndarray) -> float:
    """Sum over coordinates of the population variance across samples ([n, N] input)."""
    s = np.asarray(samples, dtype=np.float64)
    return float(np.sum(_spread(s, axis=0)))


def _spread(x: np.ndarray, axis: int) -> np.ndarray:
    """Population variance, shifted by the first sample so identical samples give exactly 0."""
    return np.var(x - np.take(x, [0], axis=axis), axis=axis)


# ---------------------------------------------------------------- batched inference

def prior_arrays(dm: DmModel, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with K.no_grad():
        mu, s = prior_graph(dm.bind(), Tensor(e))
    return mu.data, s.data


def sampled_next_items(dm: DmModel, e: np.ndarray, rng: Rng, n: int | None = None,
                       sigma_scale: float = 1.0) -> np.ndarray:
    """r̂ samples from the prior, shape [B, n, N]."""
    n = dm.cfg.samples if n is None else n
    mu, s = prior_arrays(dm, e)
    b, d = mu.shape
    eps = rng.normal((b, n, d))
    z = mu[:, None, :] + sigma_scale * s[:, None, :] * eps
    e_rep = np.repeat(e, n, axis=0)
    with K.no_grad():
        r = next_item_graph(dm.bind(), Tensor(e_rep), Tensor(z.reshape(b * n, d)), dm.cfg.head)
    return r.data.reshape(b, n, -1)


def nu_uncertainty(dm: DmModel, e: np.ndarray, rng: Rng, n: int | None = None,
                   sigma_scale: float = 1.0) -> np.ndarray:
    r = sampled_next_items(dm, e, rng, n, sigma_scale)
    return _spread(r, axis=1).sum(axis=1)


def mu_uncertainty(dm: DmModel, e_cur: np.ndarray, e_prev: np.ndarray, base_detector, rng: Rng,
                   n: int | None = None) -> np.ndarray:
    """Population variance of n MRS values from independent (z_prev, z_cur) draws.

    Each draw shifts both sequence encodings by their sampled next-item
    embeddings before scoring with the u-free detector.
    """
    n = dm.cfg.samples if n is None else n
    r_cur = sampled_next_items(dm, e_cur, rng.child(0), n)
    r_prev = sampled_next_items(dm, e_prev, rng.child(1), n)
    b = e_cur.shape[0]
    a = (e_cur[:, None, :] + r_cur).reshape(b * n, -1)
    c = (e_prev[:, None, :] + r_prev).reshape(b * n, -1)
    scores = base_detector.score_array(a, c).reshape(b, n)
    return _spread(scores, axis=1)


def uncertainty(seq: Sequence[int], dm: DmModel, rng: Rng, prev_seq: Sequence[int] | None = None,
                base_detector=None) -> float:
    """u for one click sequence; MU mode also needs the previous sequence and a u-free detector."""
    e = _encode(dm, _pack(dm, [seq]))
    if dm.cfg.uncertainty == "next-item":
        return float(nu_uncertainty(dm, e, rng)[0])
    if base_detector is None:
        raise DmError("MU uncertainty needs a trained detector without uncertainty input")
    e_prev = _encode(dm, _pack(dm, [prev_seq if prev_seq is not None else seq]))
    return float(mu_uncertainty(dm, e, e_prev, base_detector, rng)[0])


def uncertainty_batch(dm: DmModel, seqs: Sequence[Sequence[int]], prev_seqs: Sequence[Sequence[int]] | None,
                      rng: Rng, base_detector=None, encodings: np.ndarray | None = None,
                      prev_encodings: np.ndarray | None = None, chunk: int = 2048) -> np.ndarray:
    e = encodings if encodings is not None else _encode(dm, _pack(dm, seqs))
    out = []
    for k, s in enumerate(range(0, len(e), chunk)):
        sub = rng.child(k)
        if dm.cfg.uncertainty == "next-item":
            out.append(nu_uncertainty(dm, e[s:s + chunk], sub))
        else:
            if base_detector is None:
                raise DmError("MU uncertainty needs a trained detector without uncertainty input")
            ep = prev_encodings if prev_encodings is not None else _encode(dm, _pack(dm, prev_seqs))
            out.append(mu_uncertainty(dm, e[s:s + chunk], ep[s:s + chunk], base_detector, sub))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- training

@dataclass
class DmBatch:
    seqs: SeqBatch
    items: np.ndarray
    labels: np.ndarray
    e: np.ndarray          # frozen backbone encodings of seqs
    weights: list[np.ndarray]  # frozen generated classifier params for seqs
    biases: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.items)

    def take(self, idx) -> "DmBatch":
        return DmBatch(self.seqs.take(idx), self.items[idx], self.labels[idx], self.e[idx],
                       [w[idx] for w in self.weights], [b[idx] for b in self.biases])


def make_dm_batch(bundle: ModelBundle, seqs: Sequence[Sequence[int]], items, labels) -> DmBatch:
    c = bundle.cfg
    packed = pack_sequences(seqs, c.max_len, c.vocab_size)
    w, b = bundle.generate_arrays(packed)
    return DmBatch(packed, np.asarray(items, dtype=np.int64), np.asarray(labels, dtype=np.float64),
                   bundle.encode_array(packed), w, b)


def dm_loss_graph(P, cfg: DmConfig, bb_cfg, batch: DmBatch, eps: np.ndarray):
    """(total, L_rec, L_dist) with z drawn from the posterior via reparameterization."""
    e = Tensor(batch.e)
    r = candidate_embedding(P, batch.items, BB)
    mu_q, s_q = posterior_graph(P, e, r)
    mu_p, s_p = prior_graph(P, e)
    z = K.add(mu_q, K.mul(s_q, Tensor(eps)))
    r_hat = next_item_graph(P, e, z, cfg.head)
    if cfg.loss == "classification":
        x = features(P, bb_cfg, batch.seqs, r_hat, BB)
        dyn = DynamicParams([Tensor(w) for w in batch.weights], [Tensor(b) for b in batch.biases])
        l_rec = K.reduce_mean(K.bce_with_logits(classify_logits(x, dyn), batch.labels))
    else:
        pos = batch.labels > 0.5
        if not pos.any():
            raise DmError("regression loss needs at least one positive sample in the batch")
        d = K.sub(r_hat, r)
        sq = K.mul(d, d)
        mask = Tensor(np.repeat(pos[:, None].astype(np.float64), sq.shape[1], axis=1) / (pos.sum() * sq.shape[1]))
        l_rec = K.reduce_sum(K.mul(sq, mask))
    l_dist = K.reduce_mean(kl_graph(mu_q, s_q, mu_p, s_p))
    total = K.add(l_rec, K.scale(l_dist, cfg.beta)) if cfg.beta != 0 else l_rec
    return total, l_rec, l_dist


def dm_loss(batch: DmBatch, dm: DmModel, rng: Rng) -> tuple[float, float, float]:
    if len(batch) == 0:
        raise DmError("dm_loss: empty batch")
    eps = rng.normal((len(batch), dm.cfg.latent))
    with K.no_grad():
        total, rec, dist = dm_loss_graph(dm.bind(), dm.cfg, dm.bundle.cfg, batch, eps)
    return float(total.data), float(rec.data), float(dist.data)


def train_dm(bundle: ModelBundle, batch: DmBatch, cfg: DmConfig, dm: DmModel | None = None) -> DmModel:
    """Fit prior, posterior and next-item head against the frozen backbone and generator."""
    if not bundle.trained:
        raise DmError("train_dm: model bundle is not trained")
    if cfg.loss == "regression":
        batch = batch.take(np.flatnonzero(batch.labels > 0.5))
    if len(batch) == 0:
        raise DmError("train_dm: empty training set")
    dm = dm or init_dm(bundle, cfg, cfg.seed)
    names = dm.params.names()
    opt = K.make_optimizer(cfg.optimizer, dm.params, cfg.lr)
    rng = Rng([cfg.seed, 43])
    noise = rng.child(1)
    bb_cfg = bundle.cfg

    def graph(P, b, eps):
        return dm_loss_graph(P, cfg, bb_cfg, b, eps)

    for _ in range(cfg.epochs):
        sums = np.zeros(3)
        for idx in iterate_minibatches(len(batch), cfg.batch_size, rng):
            sub = batch.take(idx)
            eps = noise.normal((len(idx), cfg.latent))
            dm.params.zero_grad()
            bound = dm.bind(names)
            total, rec, dist = graph(bound, sub, eps)
            total.backward()
            for k in names:
                if bound[k].grad is not None:
                    dm.params.grads[k] += bound[k].grad
            opt.step(names)
            sums += np.array([float(total.data), float(rec.data), float(dist.data)]) * len(idx)
        dm.loss_history.append(tuple(sums / len(batch)))
    dm.params.zero_grad()
    dm.trained = True
    return dm
