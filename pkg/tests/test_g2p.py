import math

import numpy as np
import pytest
import torch

from accent_tts.g2p import (
    BOS_INDEX,
    EOS_INDEX,
    G2P_GROUPS,
    G2PConfig,
    G2PError,
    G2PHyper,
    extract_bottleneck,
    g2p_decode,
    g2p_forward,
    g2p_loss,
    g2p_trainable_mask,
    init_g2p,
    train_g2p,
)
from accent_tts.lexicon import AccentId, G2PExample
from accent_tts.metrics import per

from oracles import gradient_check

ACC0, ACC1 = AccentId(0, "x"), AccentId(1, "y")


def small_config(**kw):
    base = dict(grapheme_vocab=29, accent_table_size=3, model_dim=32, encoder_layers=1, decoder_layers=1, heads=2, ff_dim=64, dropout=0.0, accent_dim=8)
    base.update(kw)
    return G2PConfig(**base)


@pytest.fixture(scope="module")
def full():
    return init_g2p(G2PConfig(grapheme_vocab=29, accent_table_size=3), seed=0)


def test_init_deterministic():
    a, b = init_g2p(small_config(), 7), init_g2p(small_config(), 7)
    assert a.fingerprint() == b.fingerprint()
    assert init_g2p(small_config(), 8).fingerprint() != a.fingerprint()


def test_full_size_shapes(full):
    # stored as [out, in]; the mathematical map is 256 -> 82
    assert tuple(full.output_projection.weight.T.shape) == (256, 82)
    assert full.prenet_projection.weight.shape[1] == 256 + 32
    assert full.prenet_accent_embedding.weight.shape == (3, 32)
    assert set(full.group_names) == set(G2P_GROUPS)
    assert full.trainable_groups == list(G2P_GROUPS)


def test_every_parameter_belongs_to_a_group(full):
    grouped = {id(p) for g in full.group_names for p in full.group(g).parameters()}
    assert grouped == {id(p) for p in full.parameters()}


def test_config_validation():
    with pytest.raises(G2PError):
        G2PConfig(grapheme_vocab=29, accent_table_size=3, model_dim=30, heads=8).validate()


def test_forward_shape(full):
    full.eval()
    logits = g2p_forward(full, list(range(2, 14)), [BOS_INDEX] + list(range(4, 12)), ACC0)
    assert logits.shape == (9, 82)


def test_accent_changes_logits(full):
    full.eval()
    g, p = [5, 6, 7], [BOS_INDEX, 10, 11]
    assert not torch.equal(g2p_forward(full, g, p, ACC0), g2p_forward(full, g, p, ACC1))


def test_forward_errors(full):
    with pytest.raises(G2PError):
        g2p_forward(full, [], [BOS_INDEX], ACC0)
    with pytest.raises(G2PError):
        g2p_forward(full, [500], [BOS_INDEX], ACC0)
    with pytest.raises(G2PError):
        g2p_forward(full, [5], [BOS_INDEX, 90], ACC0)


def test_causality():
    m = init_g2p(small_config(), 0).eval()
    g = [5, 6, 7, 8]
    a = g2p_forward(m, g, [BOS_INDEX, 10, 11, 12, 13], ACC0)
    b = g2p_forward(m, g, [BOS_INDEX, 10, 11, 40, 50], ACC0)
    assert torch.allclose(a[:3], b[:3], atol=1e-6)
    assert not torch.allclose(a[3:], b[3:])


def test_loss_uniform():
    loss = g2p_loss(torch.zeros(5, 82), [4, 5, 6, 7, 8])
    assert float(loss) == pytest.approx(math.log(82), abs=1e-6)
    assert math.log(82) == pytest.approx(4.4067, abs=1e-4)


def test_loss_margin_limit():
    targets = [4, 9]
    prev = float("inf")
    for margin in (1.0, 5.0, 20.0):
        logits = torch.zeros(2, 82)
        logits[0, 4] = logits[1, 9] = margin
        cur = float(g2p_loss(logits, targets))
        assert cur < prev
        prev = cur
    assert prev < 1e-6


def test_loss_hand_softmax():
    # index 0 is padding, so the three live classes sit at 4..6
    logits = torch.full((2, 7), -1e9, dtype=torch.float64)
    logits[0, 4:] = torch.tensor([1.0, 2.0, 0.5])
    logits[1, 4:] = torch.tensor([0.0, -1.0, 3.0])
    l0 = -(1.0 - math.log(math.e**1 + math.e**2 + math.e**0.5))
    l1 = -(-1.0 - math.log(1 + math.e**-1 + math.e**3))
    assert float(g2p_loss(logits, [4, 5])) == pytest.approx((l0 + l1) / 2, abs=1e-12)


def test_loss_ignores_pad_and_rejects_all_pad():
    logits = torch.randn(3, 82)
    assert float(g2p_loss(logits, [5, 0, 0])) == pytest.approx(float(g2p_loss(logits[:1], [5])))
    with pytest.raises(G2PError):
        g2p_loss(logits, [0, 0, 0])


def test_loss_shape_mismatch():
    with pytest.raises(G2PError):
        g2p_loss(torch.zeros(3, 82), [1, 2])


def test_untrained_decode_contract():
    m = init_g2p(small_config(), 3)
    a = g2p_decode(m, [5, 6, 7], ACC0, max_len=6)
    b = g2p_decode(m, [5, 6, 7], ACC0, max_len=6)
    assert a == b
    assert len(a.phonemes) <= 6
    assert BOS_INDEX not in a.phonemes and EOS_INDEX not in a.phonemes


def test_masks():
    assert g2p_trainable_mask("pretrain") == set(G2P_GROUPS)
    ft = g2p_trainable_mask("finetune")
    frozen = set(G2P_GROUPS) - ft
    assert ft == {"prenet_accent_embedding", "prenet_phoneme_embedding", "prenet_projection", "output_projection"}
    assert {"grapheme_embedding", "encoder_stack", "decoder_stack"} == frozen
    with pytest.raises(ValueError):
        g2p_trainable_mask("adapt")


def test_bottleneck_teacher_forced(full):
    phon = list(range(10, 18))  # 8 phonemes + EOS step = 9 emitted steps
    h = extract_bottleneck(full, [5, 6, 7, 8], ACC0, phon)
    assert h.shape == (9, 256)
    assert np.array_equal(h, extract_bottleneck(full, [5, 6, 7, 8], ACC0, phon))
    assert not np.array_equal(h, extract_bottleneck(full, [5, 6, 7, 8], ACC1, phon))
    assert np.isfinite(h).all()


def test_bottleneck_inference_rows():
    m = init_g2p(small_config(max_decode_len=5), 1)
    res = g2p_decode(m, [5, 6], ACC0)
    h = extract_bottleneck(m, [5, 6], ACC0)
    assert len(h) == len(res.phonemes) + (0 if res.truncated else 1)


def _pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        g = list(rng.integers(2, 29, size=rng.integers(2, 5)))
        p = [BOS_INDEX] + [int(x) + 10 for x in g] + [EOS_INDEX]
        out.append(G2PExample(g, p, ACC0))
    return out


def test_overfit_and_decode():
    m = init_g2p(small_config(), 0)
    data = [G2PExample([2, 3], [BOS_INDEX, 20, 21, EOS_INDEX], ACC0)]
    m, hist = train_g2p(m, data, "pretrain", G2PHyper(lr=3e-3, batch=1, epochs=60, seed=0))
    assert g2p_decode(m, [2, 3], ACC0).phonemes == [20, 21]
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_memorizes_fifty_pairs():
    data = _pairs(50)
    m = init_g2p(small_config(model_dim=64, ff_dim=128, heads=4), 0)
    m, _ = train_g2p(m, data, "pretrain", G2PHyper(lr=3e-3, batch=16, epochs=200, seed=0))
    errs = [per(ex.phonemes[1:-1], g2p_decode(m, ex.graphemes, ACC0).phonemes) for ex in data]
    assert max(errs) == 0.0


def test_finetune_freezes_groups():
    m = init_g2p(small_config(), 0)
    before = m.fingerprint()
    m, _ = train_g2p(m, _pairs(8), "finetune", G2PHyper(lr=1e-2, batch=4, epochs=3, seed=0))
    after = m.fingerprint()
    for g in G2P_GROUPS:
        if g in g2p_trainable_mask("finetune"):
            assert before[g] != after[g], g
        else:
            assert before[g] == after[g], g


def test_train_empty_corpus():
    with pytest.raises(G2PError):
        train_g2p(init_g2p(small_config(), 0), [], "pretrain")


def test_train_returns_best_validation_epoch():
    m = init_g2p(small_config(), 0)
    data = _pairs(6)
    m, hist = train_g2p(m, data, "pretrain", G2PHyper(lr=3e-3, batch=6, epochs=5, seed=0), validation=data[:2])
    assert all("val_loss" in h for h in hist)


def test_accent_swap_sensitivity():
    # one probe word with disjoint transcriptions under two accent ids
    g = [5, 6, 7]
    data = [G2PExample(g, [BOS_INDEX, 30, 31, EOS_INDEX], ACC0), G2PExample(g, [BOS_INDEX, 40, 41, 42, EOS_INDEX], ACC1)]
    m = init_g2p(small_config(), 0)
    m, _ = train_g2p(m, data, "pretrain", G2PHyper(lr=3e-3, batch=2, epochs=80, seed=0))
    assert g2p_decode(m, g, ACC0).phonemes == [30, 31]
    assert g2p_decode(m, g, ACC1).phonemes == [40, 41, 42]


def test_gradient_check_two_layer_float64():
    cfg = small_config(model_dim=16, encoder_layers=2, decoder_layers=2, heads=2, ff_dim=24, accent_dim=4)
    m = init_g2p(cfg, 0).double()
    m.train()  # dropout is 0, so train mode is deterministic
    g, pin, pout = [4, 9, 12], [BOS_INDEX, 20, 21, 22], [20, 21, 22, EOS_INDEX]

    def loss():
        return g2p_loss(g2p_forward(m, g, pin, ACC1), pout)

    worst = gradient_check(m, loss, G2P_GROUPS)
    assert max(worst.values()) < 1e-4, worst
