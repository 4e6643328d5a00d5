import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from accent_tts.acoustic import (
    ACOUSTIC_FINETUNE_GROUPS,
    ACOUSTIC_GROUPS,
    AcousticConfig,
    AcousticError,
    AcousticHyper,
    AcousticItem,
    DecoderOutput,
    acoustic_loss,
    acoustic_trainable_mask,
    batch_loss,
    collate,
    decode_mel,
    duration_frames,
    encode_text,
    guided_attention_loss,
    init_acoustic,
    predict_duration,
    predict_pitch,
    quantize_pitch,
    synthesize_from_bottleneck,
    train_acoustic,
)

from oracles import gradient_check


def reduced(**kw):
    base = dict(
        bottleneck_dim=6,
        enc_dim=16,
        birnn_dim=16,
        speaker_dim=5,
        enc_convs=2,
        predictor_dims=(8, 8),
        pitch_embed_dim=16,
        attn_dim=8,
        attn_filters=4,
        attn_kernel=3,
        prenet_dim=8,
        prenet_dropout=0.0,
        predictor_dropout=0.0,
        dec_rnn_dim=32,
        dec_dropout=0.0,
        mel_bins=8,
        postnet_dim=8,
        postnet_convs=2,
        postnet_kernel=3,
    )
    base.update(kw)
    return AcousticConfig(**base)


def item(rng, t=4, n=6, c=None, uid="u"):
    c = c or reduced()
    stop = np.zeros(n)
    stop[-1] = 1
    return AcousticItem(
        uid,
        rng.normal(size=(t, c.bottleneck_dim)),
        rng.normal(size=c.speaker_dim),
        rng.normal(size=(n, c.mel_bins)),
        stop,
        rng.normal(size=t),
        np.log(rng.integers(1, 4, size=t).astype(float)),
    )


@pytest.fixture(scope="module")
def full():
    return init_acoustic(AcousticConfig(), 0).eval()


# ---------------------------------------------------------------- shapes


def test_full_size_encoder_shapes(full):
    rng = np.random.default_rng(0)
    enc, enc_spk = encode_text(full, rng.normal(size=(9, 256)), rng.normal(size=256))
    assert enc.shape == enc_spk.shape == (9, 512)
    assert predict_pitch(full, enc_spk).shape == (9,)
    assert predict_duration(full, enc_spk).shape == (9,)


def test_full_size_teacher_decoding(full):
    rng = np.random.default_rng(1)
    with torch.no_grad():
        _, enc_spk = encode_text(full, rng.normal(size=(10, 256)), rng.normal(size=256))
        out = decode_mel(full, enc_spk, np.zeros(10), np.zeros(10), "teacher", rng.normal(size=(120, 80)))
    assert out.mel_pre.shape == out.mel_post.shape == (120, 80)
    assert out.stop_logits.shape == (120,)
    assert out.alignment.shape == (120, 10)
    assert torch.allclose(out.alignment.sum(1), torch.ones(120), atol=1e-5)


def test_groups_cover_all_parameters(full):
    assert set(full.group_names) == set(ACOUSTIC_GROUPS)
    grouped = {id(p) for g in full.group_names for p in full.group(g).parameters()}
    assert grouped == {id(p) for p in full.parameters()}


def test_config_validation():
    with pytest.raises(AcousticError):
        AcousticConfig(birnn_dim=256).validate()
    with pytest.raises(AcousticError):
        AcousticConfig(enc_kernel=4).validate()


def test_non_finite_bottleneck_rejected():
    m = init_acoustic(reduced(), 0)
    b = np.zeros((3, 6))
    b[1, 2] = np.nan
    with pytest.raises(AcousticError):
        encode_text(m, b, np.zeros(5))


def test_zero_speaker_adds_constant_bias():
    m = init_acoustic(reduced(), 0).eval()
    # softsign(W*0 + b) = softsign(b): zero the bias and the projection vanishes
    with torch.no_grad():
        m.speaker_projection.linear.bias.zero_()
        enc, enc_spk = encode_text(m, np.random.default_rng(0).normal(size=(4, 6)), np.zeros(5))
    assert torch.equal(enc, enc_spk)


# ---------------------------------------------------------------- pitch / duration helpers


def test_quantize_examples():
    assert int(quantize_pitch(torch.tensor(0.0))) == 128
    assert int(quantize_pitch(torch.tensor(-10.0))) == 0
    assert int(quantize_pitch(torch.tensor(10.0))) == 255
    assert int(quantize_pitch(np.array(-4.0))) == 0
    assert quantize_pitch(np.array([0.0, 3.99])).tolist() == [128, 255]


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_quantize_monotone_and_bounded(a, b):
    a, b = sorted((a, b))
    qa, qb = quantize_pitch(np.array(a)), quantize_pitch(np.array(b))
    assert 0 <= qa <= qb <= 255
    assert int(quantize_pitch(torch.tensor(a, dtype=torch.float64))) == int(qa)


def test_duration_frames_clamps():
    assert duration_frames(np.array([-5.0, 0.0, math.log(3)])).tolist() == [1, 1, 3]


def test_pitch_perturbation_changes_decoder_input():
    m = init_acoustic(reduced(), 0).eval()
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(5, 8))
    with torch.no_grad():
        _, enc_spk = encode_text(m, rng.normal(size=(3, 6)), rng.normal(size=5))
        a = decode_mel(m, enc_spk, np.zeros(3), np.zeros(3), "teacher", gt)
        b = decode_mel(m, enc_spk, np.array([0.0, 1.0, 0.0]), np.zeros(3), "teacher", gt)
    assert not torch.equal(a.mel_pre, b.mel_pre)


def test_decode_mode_errors():
    m = init_acoustic(reduced(), 0).eval()
    with pytest.raises(AcousticError):
        decode_mel(m, torch.zeros(3, 16), np.zeros(3), np.zeros(3), "teacher")
    with pytest.raises(AcousticError):
        decode_mel(m, torch.zeros(3, 16), np.zeros(3), np.zeros(3), "beam")


def test_untrained_inference_truncates_at_cap():
    m = init_acoustic(reduced(stop_threshold=1.0, attn_window=0), 0)  # sigmoid never exceeds 1
    res = synthesize_from_bottleneck(m, np.ones((3, 6)), np.ones(5))
    assert res.truncated and res.mel.shape == (30, 8)
    assert res.durations().sum() == 30


@pytest.mark.parametrize("window", [1, 2])
def test_windowed_inference_attends_near_focus(window):
    rng = np.random.default_rng(3)
    m = init_acoustic(reduced(attn_window=window, stop_threshold=1.0), 0)
    res = synthesize_from_bottleneck(m, rng.normal(size=(8, 6)), rng.normal(size=5))
    focus = 0
    for row in res.alignment:
        outside = np.ones(len(row), bool)
        outside[max(0, focus - 1) : focus + window + 1] = False
        assert np.all(row[outside] == 0.0)
        focus = int(row.argmax())


def test_windowed_inference_stops_after_dwelling_on_last_row():
    # a single row is the last row from the first frame, so only the dwell rule can end decoding
    m = init_acoustic(reduced(stop_threshold=1.0), 0)
    res = synthesize_from_bottleneck(m, np.ones((1, 6)), np.ones(5))
    last = int(np.maximum(1, np.round(np.exp(res.logdur[-1]))))
    assert not res.truncated and len(res.mel) == 2 * last + 1


# ---------------------------------------------------------------- loss


def _out(mel):
    mel = torch.as_tensor(mel, dtype=torch.float64)
    return DecoderOutput(mel, mel, torch.zeros(len(mel), dtype=torch.float64), torch.zeros(len(mel), 1))


def test_loss_mel_offset_by_one():
    gt = np.zeros((4, 8))
    z = np.zeros(3)
    total, parts = acoustic_loss(_out(gt + 1), gt, np.zeros(4), z, z, z, z, weights=(1, 0, 0, 0))
    # pre and post each contribute an MSE of 1
    assert float(total) == 2.0 and float(parts["mel"]) == 2.0


def test_loss_stop_bce_at_zero_logit():
    gt = np.zeros((4, 8))
    z = np.zeros(3)
    _, parts = acoustic_loss(_out(gt), gt, np.array([0, 0, 0, 1.0]), z, z, z, z)
    assert float(parts["stop"]) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_prosody_terms():
    gt = np.zeros((2, 8))
    _, parts = acoustic_loss(_out(gt), gt, np.zeros(2), np.array([1.0, 2.0]), np.zeros(2), np.array([0.0, 0.0]), np.ones(2))
    assert float(parts["f0"]) == 2.5 and float(parts["dur"]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=4, max_size=4), st.integers(0, 1000))
def test_loss_linear_in_weights(w, seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(3, 8))
    out = DecoderOutput(*(torch.as_tensor(x) for x in (rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), rng.normal(size=3), np.zeros((3, 2)))))
    args = (gt, rng.integers(0, 2, 3).astype(float), rng.normal(size=2), rng.normal(size=2), rng.normal(size=2), rng.normal(size=2))
    total, parts = acoustic_loss(out, *args, weights=w)
    expected = sum(wi * float(parts[k]) for wi, k in zip(w, ("mel", "stop", "f0", "dur")))
    assert float(total) == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert all(float(v) >= 0 for v in parts.values())


def test_loss_shape_mismatch():
    gt = np.zeros((4, 8))
    z = np.zeros(3)
    with pytest.raises(AcousticError):
        acoustic_loss(_out(np.zeros((5, 8))), gt, np.zeros(4), z, z, z, z)
    with pytest.raises(AcousticError):
        acoustic_loss(_out(gt), gt, np.zeros(4), z, z, np.zeros(2), z)


def test_batched_loss_ignores_padding():
    c = reduced()
    rng = np.random.default_rng(3)
    m = init_acoustic(c, 0).eval()
    short, long = item(rng, 3, 4), item(rng, 5, 7)
    with torch.no_grad():
        alone, _ = batch_loss(m, collate([short]))
        mixed, parts = batch_loss(m, collate([short, long]))
        alone_long, _ = batch_loss(m, collate([long]))
    # masked means: padding contributes nothing, so the batch lies between the two items
    lo, hi = sorted((float(alone), float(alone_long)))
    assert lo - 1e-5 <= float(mixed) <= hi + 1e-5


def test_guided_attention_examples():
    diag = torch.eye(4)[None]
    lens = torch.tensor([4])
    assert float(guided_attention_loss(diag, lens, lens)) == 0.0
    anti = torch.eye(4).flip(1)[None]
    # by hand: off-diagonal cells sit at |t/T - n/N| = 3/4 or 1/4
    w = [1 - math.exp(-(d**2) / (2 * 0.2**2)) for d in (0.75, 0.25, 0.25, 0.75)]
    assert float(guided_attention_loss(anti, lens, lens)) == pytest.approx(sum(w) / 16, rel=1e-6)


def test_guided_attention_ignores_padding():
    a = torch.zeros(1, 3, 5)
    a[0, :, 4] = 1.0  # all mass on a padded phoneme
    assert float(guided_attention_loss(a, torch.tensor([3]), torch.tensor([3]))) == 0.0


def test_guided_attention_reported_in_history():
    rng = np.random.default_rng(9)
    data = [item(rng, uid=str(k)) for k in range(2)]
    _, hist = train_acoustic(init_acoustic(reduced(), 0), data, "pretrain", AcousticHyper(lr=1e-3, batch=2, epochs=1, guided_attention=1.0))
    assert "attn" in hist[0] and hist[0]["attn"] > 0


# ---------------------------------------------------------------- masks and training


def test_masks():
    assert acoustic_trainable_mask("pretrain") == set(ACOUSTIC_GROUPS)
    ft = acoustic_trainable_mask("finetune")
    assert ft == set(ACOUSTIC_FINETUNE_GROUPS)
    assert set(ACOUSTIC_GROUPS) - ft == {"text_encoder", "speaker_projection", "postnet"}


def test_finetune_freezes_bitwise():
    c = reduced()
    rng = np.random.default_rng(4)
    data = [item(rng, uid=str(k)) for k in range(4)]
    m = init_acoustic(c, 0)
    before = m.fingerprint()
    m, hist = train_acoustic(m, data, "finetune", AcousticHyper(lr=1e-2, batch=2, epochs=2))
    after = m.fingerprint()
    for g in ACOUSTIC_GROUPS:
        assert (before[g] == after[g]) == (g not in ACOUSTIC_FINETUNE_GROUPS), g
    assert len(hist) == 2 and set(hist[0]) == {"epoch", "total", "mel", "stop", "f0", "dur"}
    assert not m.training


def test_training_deterministic():
    c = reduced()
    data = [item(np.random.default_rng(k), uid=str(k)) for k in range(3)]
    runs = []
    for _ in range(2):
        m, hist = train_acoustic(init_acoustic(c, 1), data, "pretrain", AcousticHyper(lr=1e-2, batch=2, epochs=3, seed=5))
        runs.append((m.fingerprint(), hist))
    assert runs[0] == runs[1]


def test_empty_training_set():
    with pytest.raises(AcousticError):
        train_acoustic(init_acoustic(reduced(), 0), [], "pretrain")


def test_overfit_single_utterance_teacher_forced():
    c = reduced()
    rng = np.random.default_rng(6)
    it = item(rng, 3, 8)
    it.mel = np.tile(np.linspace(-1, 1, 8)[:, None], (1, 8)) * 0.5
    m = init_acoustic(c, 0)
    m, hist = train_acoustic(m, [it], "pretrain", AcousticHyper(lr=1e-2, batch=1, epochs=150))
    assert hist[-1]["mel"] < 0.1 * hist[0]["mel"]
    assert hist[-1]["total"] < hist[0]["total"]


# ---------------------------------------------------------------- gradients


def test_gradient_check_composite_loss_float64():
    c = reduced()
    rng = np.random.default_rng(7)
    m = init_acoustic(c, 0).double()
    m.eval()  # batch norm uses running statistics; all dropout is zero anyway
    # zero-initialised biases put ReLUs exactly on their kink for zero inputs
    # (first decoder frame, logdur = 0); jitter moves the check to a smooth point
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    batch = collate([item(rng, 4, 6), item(rng, 3, 5)], torch.float64)
    worst = gradient_check(m, lambda: batch_loss(m, batch)[0], ACOUSTIC_GROUPS)
    assert max(worst.values()) < 1e-4, worst
