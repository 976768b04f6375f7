from __future__ import annotations

import math

import numpy as np
import pytest

from idealrec import kernel as K
from idealrec.kernel import ParamStore, Rng, Tensor
from idealrec.models import (
    BackboneConfig,
    DynamicParams,
    Interaction,
    classify_logits,
    encode_sequence,
    hard_decision,
    init_backbone,
    pack_sequences,
    predict_ctr,
    truncate,
)


def _backbone(cfg: BackboneConfig, seed: int = 0) -> ParamStore:
    store = ParamStore()
    init_backbone(store, cfg, Rng(seed))
    return store


def _encode(store, cfg, seq):
    with K.no_grad():
        return encode_sequence(store.bind(()), cfg, pack_sequences([seq], cfg.max_len, cfg.vocab_size)).data[0]


def test_single_item_mean_pool_returns_its_embedding():
    cfg = BackboneConfig(vocab_size=5, dim=3)
    store = _backbone(cfg)
    store.params["bb.enc.w"] = np.eye(3)
    store.params["bb.enc.b"] = np.zeros(3)
    assert np.allclose(_encode(store, cfg, [2]), store.params["bb.item_emb"][2])


def test_two_item_mean_pool_hand_average():
    cfg = BackboneConfig(vocab_size=2, dim=2)
    store = _backbone(cfg)
    store.params["bb.item_emb"] = np.array([[1.0, 2.0], [3.0, -4.0]])
    store.params["bb.enc.w"] = np.eye(2)
    store.params["bb.enc.b"] = np.zeros(2)
    assert _encode(store, cfg, [0, 1]).tolist() == [2.0, -1.0]


@pytest.mark.parametrize("encoder", ["mean-pool-attention", "recurrent"])
def test_encoding_is_deterministic(encoder):
    cfg = BackboneConfig(vocab_size=20, dim=4, encoder=encoder)
    store = _backbone(cfg)
    assert _encode(store, cfg, [3, 1, 7]).tobytes() == _encode(store, cfg, [3, 1, 7]).tobytes()


def test_out_of_vocabulary_rejected():
    cfg = BackboneConfig(vocab_size=5, dim=3)
    with pytest.raises(IndexError):
        _encode(_backbone(cfg), cfg, [1, 5])


def test_mean_pool_is_permutation_invariant():
    cfg = BackboneConfig(vocab_size=20, dim=4)
    store = _backbone(cfg)
    assert np.allclose(_encode(store, cfg, [3, 1, 7, 9]), _encode(store, cfg, [9, 7, 3, 1]), atol=1e-14)


def test_recurrent_encoder_is_order_sensitive():
    cfg = BackboneConfig(vocab_size=20, dim=4, encoder="recurrent")
    store = _backbone(cfg)
    assert not np.allclose(_encode(store, cfg, [3, 1, 7]), _encode(store, cfg, [7, 1, 3]))


def test_truncation_keeps_most_recent_items():
    seq = list(range(45))
    assert truncate(seq, 30) == tuple(range(15, 45))
    batch = pack_sequences([seq], 30)
    assert batch.ids[0].tolist() == list(range(15, 45))
    short = pack_sequences([[4, 5]], 4)
    assert short.ids[0].tolist() == [0, 0, 4, 5] and short.mask[0].tolist() == [0, 0, 1, 1]


def test_zero_dynamic_params_give_one_half(rng):
    cfg = BackboneConfig(vocab_size=30, dim=6)
    store = _backbone(cfg)
    P = store.bind(())
    for _ in range(20):
        seq = tuple(int(i) for i in rng.integers(0, 30, size=rng.integers(1, 10)))
        p = predict_ctr(P, cfg, Interaction(0, int(rng.integers(0, 30)), seq, 1), DynamicParams.zeros(cfg))
        assert p == 0.5


def test_hand_set_one_dim_toy():
    # features: tanh(0*[s; c] + atanh(0.5)) = 0.5; layer 1 doubles it to 1.0,
    # layer 2 applies weight 2 and bias -1 -> logit 1
    cfg = BackboneConfig(vocab_size=3, dim=1)
    store = _backbone(cfg)
    store.params["bb.feat.w"] = np.zeros((2, 1))
    store.params["bb.feat.b"] = np.array([math.atanh(0.5)])
    dyn = DynamicParams([Tensor([[2.0]]), Tensor([[2.0]])], [Tensor([0.0]), Tensor([-1.0])])
    p = predict_ctr(store.bind(()), cfg, Interaction(0, 1, (0, 2), 1), dyn)
    assert p == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)
    assert round(p, 4) == 0.7311


def test_classifier_on_unit_embedding():
    dyn = DynamicParams([Tensor([[1.0]]), Tensor([[2.0]])], [Tensor([0.0]), Tensor([-1.0])])
    logit = classify_logits(Tensor(np.array([[1.0]])), dyn)
    assert float(logit.data[0]) == 1.0


def test_probabilities_strictly_inside_unit_interval(rng):
    cfg = BackboneConfig(vocab_size=50, dim=5)
    store = _backbone(cfg, 2)
    P = store.bind(())
    for _ in range(1000):
        w1 = rng.normal(size=(5, 5)) * 3
        w2 = rng.normal(size=(5, 1)) * 3
        dyn = DynamicParams([Tensor(w1), Tensor(w2)], [Tensor(rng.normal(size=5)), Tensor(rng.normal(size=1))])
        seq = tuple(int(i) for i in rng.integers(0, 50, size=rng.integers(1, 31)))
        p = predict_ctr(P, cfg, Interaction(0, int(rng.integers(0, 50)), seq, 0), dyn)
        assert 0.0 < p < 1.0


def test_dynamic_shape_mismatch_rejected():
    cfg = BackboneConfig(vocab_size=5, dim=3)
    bad = DynamicParams([Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 1)))], [Tensor(np.zeros(3)), Tensor(np.zeros(1))])
    with pytest.raises(K.ShapeError, match="dynamic layer 0"):
        predict_ctr(_backbone(cfg).bind(()), cfg, Interaction(0, 1, (0,), 1), bad)


def test_hard_decision():
    assert hard_decision(0.7) == 1
    assert hard_decision(0.3) == 0
    assert hard_decision(0.5) == 1
    with pytest.raises(ValueError):
        hard_decision(1.2)


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(vocab_size=5, dim=0)
    with pytest.raises(ValueError):
        BackboneConfig(vocab_size=5, max_len=0)
    with pytest.raises(ValueError):
        BackboneConfig(vocab_size=5, encoder="transformer")
    assert BackboneConfig(vocab_size=5).layer_dims == [(32, 32), (32, 1)]
