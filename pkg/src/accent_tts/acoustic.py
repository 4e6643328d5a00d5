"""Attention-based acoustic model with phoneme-level pitch and duration predictors.

The encoder consumes G2P phoneme-bottleneck vectors; the speaker projection is
added to its output before both predictors. Decoder memory is the sum of that
speaker-conditioned encoding, a pitch embedding of the quantized F0 and a dense
projection of the log-duration, attended with location-sensitive attention.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .params import ParameterStore, init_parameters, mask_for_stage

logger = logging.getLogger(__name__)

ACOUSTIC_GROUPS = (
    "text_encoder",
    "speaker_projection",
    "pitch_predictor",
    "pitch_embedding",
    "duration_predictor",
    "duration_projection",
    "attention",
    "decoder",
    "postnet",
)
ACOUSTIC_FINETUNE_GROUPS = (
    "duration_predictor",
    "duration_projection",
    "attention",
    "pitch_predictor",
    "pitch_embedding",
    "decoder",
)


class AcousticError(ValueError):
    pass


@dataclass
class AcousticConfig:
    bottleneck_dim: int = 256
    enc_dim: int = 512
    enc_convs: int = 3
    enc_kernel: int = 5
    birnn_dim: int = 512
    speaker_dim: int = 256
    predictor_dims: Tuple[int, int] = (512, 256)
    predictor_kernel: int = 3
    predictor_dropout: float = 0.5
    pitch_bins: int = 256
    pitch_range: float = 4.0
    pitch_embed_dim: int = 512
    attn_dim: int = 128
    attn_filters: int = 32
    attn_kernel: int = 31
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    dec_rnn_dim: int = 1024
    dec_dropout: float = 0.1
    mel_bins: int = 80
    postnet_dim: int = 512
    postnet_convs: int = 5
    postnet_kernel: int = 5
    stop_threshold: float = 0.5
    max_frames_ratio: int = 10
    # inference only: attend within [focus - 1, focus + window] and stop only once the focus is on the last
    # row; the decoder also stops after dwelling there for twice the row's predicted duration
    attn_window: int = 3

    def __post_init__(self):
        self.predictor_dims = tuple(self.predictor_dims)

    def validate(self) -> "AcousticConfig":
        if self.birnn_dim % 2:
            raise AcousticError("birnn_dim must be even (two directions)")
        if self.birnn_dim != self.enc_dim:
            # the recurrence output is the attention memory width
            raise AcousticError("birnn_dim must equal enc_dim")
        if self.enc_kernel % 2 == 0 or self.postnet_kernel % 2 == 0 or self.attn_kernel % 2 == 0:
            raise AcousticError("convolution kernels must be odd")
        if self.postnet_convs < 2:
            raise AcousticError("postnet needs at least two convolutions")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor_dims"] = list(self.predictor_dims)
        return d


@dataclass
class AcousticHyper:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 800
    seed: int = 0
    weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    grad_clip: float = 1.0
    # optional diagonal attention prior; 0 disables it and keeps the plain composite loss
    guided_attention: float = 0.0
    guided_sigma: float = 0.2

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "AcousticHyper":
        base = cls() if stage == "pretrain" else cls(lr=1e-4, batch=8, epochs=100)
        for k, v in overrides.items():
            setattr(base, k, v)
        return base


@dataclass
class AcousticItem:
    utt_id: str
    bottleneck: np.ndarray  # [T, D]
    speaker: np.ndarray  # [S]
    mel: np.ndarray  # [N, mel_bins]
    stop: np.ndarray  # [N]
    pitch: np.ndarray  # [T], normalized
    logdur: np.ndarray  # [T]


@dataclass
class DecoderOutput:
    mel_pre: Tensor
    mel_post: Tensor
    stop_logits: Tensor
    alignment: Tensor
    truncated: bool = False


def _conv(cin: int, cout: int, k: int) -> nn.Conv1d:
    return nn.Conv1d(cin, cout, k, padding=(k - 1) // 2)


class TextEncoder(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        self.phone_projection = nn.Linear(c.bottleneck_dim, c.enc_dim)
        self.convs = nn.ModuleList(
            nn.Sequential(_conv(c.enc_dim, c.enc_dim, c.enc_kernel), nn.BatchNorm1d(c.enc_dim)) for _ in range(c.enc_convs)
        )
        self.lstm = nn.LSTM(c.enc_dim, c.birnn_dim // 2, batch_first=True, bidirectional=True)

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        x = F.softsign(self.phone_projection(x)).transpose(1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        x = x.transpose(1, 2)
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class SpeakerProjection(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        self.linear = nn.Linear(c.speaker_dim, c.enc_dim)

    def forward(self, spk: Tensor) -> Tensor:
        return F.softsign(self.linear(spk))


class VariancePredictor(nn.Module):
    """conv-ReLU-LN-dropout twice, then a scalar per position."""

    def __init__(self, c: AcousticConfig):
        super().__init__()
        d1, d2 = c.predictor_dims
        self.conv1 = _conv(c.enc_dim, d1, c.predictor_kernel)
        self.norm1 = nn.LayerNorm(d1)
        self.conv2 = _conv(d1, d2, c.predictor_kernel)
        self.norm2 = nn.LayerNorm(d2)
        self.linear = nn.Linear(d2, 1)
        self.dropout = nn.Dropout(c.predictor_dropout)

    def forward(self, x: Tensor, pad: Optional[Tensor] = None) -> Tensor:
        if pad is not None:
            x = x.masked_fill(pad[..., None], 0.0)
        h = F.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2)
        h = self.dropout(self.norm1(h))
        if pad is not None:
            h = h.masked_fill(pad[..., None], 0.0)
        h = F.relu(self.conv2(h.transpose(1, 2))).transpose(1, 2)
        h = self.dropout(self.norm2(h))
        out = self.linear(h).squeeze(-1)
        if pad is not None:
            out = out.masked_fill(pad, 0.0)
        return out


class PitchEmbedding(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        self.table = nn.Embedding(c.pitch_bins, c.pitch_embed_dim)
        self.projection = nn.Linear(c.pitch_embed_dim, c.enc_dim) if c.pitch_embed_dim != c.enc_dim else None

    def forward(self, bins: Tensor) -> Tensor:
        e = self.table(bins)
        return self.projection(e) if self.projection is not None else e


class DurationProjection(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        self.linear = nn.Linear(1, c.enc_dim)
        self.dropout = nn.Dropout(c.predictor_dropout)

    def forward(self, logdur: Tensor) -> Tensor:
        return self.dropout(F.relu(self.linear(logdur[..., None])))


class LocationSensitiveAttention(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        self.query_layer = nn.Linear(c.dec_rnn_dim, c.attn_dim, bias=False)
        self.memory_layer = nn.Linear(c.enc_dim, c.attn_dim, bias=False)
        self.location_conv = nn.Conv1d(2, c.attn_filters, c.attn_kernel, padding=(c.attn_kernel - 1) // 2, bias=False)
        self.location_dense = nn.Linear(c.attn_filters, c.attn_dim, bias=False)
        self.v = nn.Linear(c.attn_dim, 1, bias=True)

    def process_memory(self, memory: Tensor) -> Tensor:
        return self.memory_layer(memory)

    def forward(self, query: Tensor, memory: Tensor, processed: Tensor, weights_cat: Tensor, pad: Tensor):
        loc = self.location_dense(self.location_conv(weights_cat).transpose(1, 2))
        energies = self.v(torch.tanh(self.query_layer(query)[:, None, :] + loc + processed)).squeeze(-1)
        energies = energies.masked_fill(pad, float("-inf"))
        weights = F.softmax(energies, dim=1)
        context = torch.bmm(weights[:, None, :], memory).squeeze(1)
        return context, weights


class Decoder(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        self.prenet1 = nn.Linear(c.mel_bins, c.prenet_dim)
        self.prenet2 = nn.Linear(c.prenet_dim, c.prenet_dim)
        self.attention_rnn = nn.LSTMCell(c.prenet_dim + c.enc_dim, c.dec_rnn_dim)
        self.decoder_rnn = nn.LSTMCell(c.dec_rnn_dim + c.enc_dim, c.dec_rnn_dim)
        self.mel_projection = nn.Linear(c.dec_rnn_dim + c.enc_dim, c.mel_bins)
        self.stop_projection = nn.Linear(c.dec_rnn_dim + c.enc_dim, 1)
        self.prenet_dropout = c.prenet_dropout
        self.rnn_dropout = c.dec_dropout

    def prenet(self, x: Tensor) -> Tensor:
        x = F.dropout(F.relu(self.prenet1(x)), self.prenet_dropout, self.training)
        return F.dropout(F.relu(self.prenet2(x)), self.prenet_dropout, self.training)


class Postnet(nn.Module):
    def __init__(self, c: AcousticConfig):
        super().__init__()
        dims = [c.mel_bins] + [c.postnet_dim] * (c.postnet_convs - 1) + [c.mel_bins]
        self.convs = nn.ModuleList(
            nn.Sequential(_conv(a, b, c.postnet_kernel), nn.BatchNorm1d(b)) for a, b in zip(dims, dims[1:])
        )

    def forward(self, mel: Tensor) -> Tensor:
        x = mel.transpose(1, 2)
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k < len(self.convs) - 1:
                x = torch.tanh(x)
        return x.transpose(1, 2)


def quantize_pitch(f0_norm, bins: int = 256, value_range: float = 4.0):
    """Uniform bins over [-range, range]; out-of-range values clamp to the edge bins."""
    if isinstance(f0_norm, Tensor):
        idx = torch.floor((f0_norm + value_range) / (2 * value_range) * bins).long()
        return idx.clamp(0, bins - 1)
    x = np.asarray(f0_norm, dtype=np.float64)
    idx = np.floor((x + value_range) / (2 * value_range) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def lengths_to_pad(lengths: Tensor, width: Optional[int] = None) -> Tensor:
    width = width or int(lengths.max())
    return torch.arange(width)[None, :] >= lengths[:, None]


class AcousticModel(ParameterStore):
    GROUPS = ACOUSTIC_GROUPS

    def __init__(self, config: AcousticConfig):
        super().__init__()
        c = self.config = config.validate()
        self.text_encoder = TextEncoder(c)
        self.speaker_projection = SpeakerProjection(c)
        self.pitch_predictor = VariancePredictor(c)
        self.pitch_embedding = PitchEmbedding(c)
        self.duration_predictor = VariancePredictor(c)
        self.duration_projection = DurationProjection(c)
        self.attention = LocationSensitiveAttention(c)
        self.decoder = Decoder(c)
        self.postnet = Postnet(c)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.mel_projection.weight.dtype

    def encode(self, bottleneck: Tensor, speaker: Tensor, lengths: Tensor) -> Tuple[Tensor, Tensor]:
        """[B,T,D] bottleneck, [B,S] speaker -> (enc_out, enc_spk), both [B,T,enc_dim]."""
        enc = self.text_encoder(bottleneck, lengths)
        return enc, enc + self.speaker_projection(speaker)[:, None, :]

    def predict(self, enc_spk: Tensor, pad: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        return self.pitch_predictor(enc_spk, pad), self.duration_predictor(enc_spk, pad)

    def memory(self, enc_spk: Tensor, pitch: Tensor, logdur: Tensor) -> Tensor:
        c = self.config
        bins = quantize_pitch(pitch, c.pitch_bins, c.pitch_range)
        return enc_spk + self.pitch_embedding(bins) + self.duration_projection(logdur)

    def _init_state(self, memory: Tensor):
        b, t, _ = memory.shape
        c = self.config
        z = lambda *s: memory.new_zeros(*s)  # noqa: E731
        return {
            "ah": z(b, c.dec_rnn_dim),
            "ac": z(b, c.dec_rnn_dim),
            "dh": z(b, c.dec_rnn_dim),
            "dc": z(b, c.dec_rnn_dim),
            "w": z(b, t),
            "wcum": z(b, t),
            "ctx": z(b, c.enc_dim),
        }

    def _step(self, prenet_out: Tensor, st: dict, memory: Tensor, processed: Tensor, pad: Tensor):
        dec = self.decoder
        ah, ac = dec.attention_rnn(torch.cat([prenet_out, st["ctx"]], -1), (st["ah"], st["ac"]))
        ah = F.dropout(ah, dec.rnn_dropout, self.training and dec.training)
        wcat = torch.stack([st["w"], st["wcum"]], dim=1)
        ctx, w = self.attention(ah, memory, processed, wcat, pad)
        dh, dc = dec.decoder_rnn(torch.cat([ah, ctx], -1), (st["dh"], st["dc"]))
        dh = F.dropout(dh, dec.rnn_dropout, self.training and dec.training)
        out = torch.cat([dh, ctx], -1)
        new = {"ah": ah, "ac": ac, "dh": dh, "dc": dc, "w": w, "wcum": st["wcum"] + w, "ctx": ctx}
        return dec.mel_projection(out), dec.stop_projection(out).squeeze(-1), w, new

    def decode_teacher(self, memory: Tensor, pad: Tensor, gt_mel: Tensor):
        """Teacher-forced decoding: frame n is predicted from ground-truth frame n-1."""
        b, n, _ = gt_mel.shape
        prev = torch.cat([gt_mel.new_zeros(b, 1, gt_mel.shape[2]), gt_mel[:, :-1]], dim=1)
        pre = self.decoder.prenet(prev)
        processed = self.attention.process_memory(memory)
        st = self._init_state(memory)
        mels, stops, aligns = [], [], []
        for k in range(n):
            mel, stop, w, st = self._step(pre[:, k], st, memory, processed, pad)
            mels.append(mel)
            stops.append(stop)
            aligns.append(w)
        mel_pre = torch.stack(mels, 1)
        return mel_pre, mel_pre + self.postnet(mel_pre), torch.stack(stops, 1), torch.stack(aligns, 1)

    def decode_infer(self, memory: Tensor, max_frames: int, last_frames: int = 0):
        """Free-running decoding of a single utterance until the stop gate fires."""
        if memory.shape[0] != 1:
            raise AcousticError("inference decodes one utterance at a time")
        pad = torch.zeros(1, memory.shape[1], dtype=torch.bool)
        processed = self.attention.process_memory(memory)
        st = self._init_state(memory)
        frame = memory.new_zeros(1, self.config.mel_bins)
        mels, stops, aligns = [], [], []
        truncated = True
        last, window = memory.shape[1] - 1, self.config.attn_window
        pos = torch.arange(memory.shape[1])[None]
        focus, dwell = 0, 0
        for _ in range(max_frames):
            mask = pad if window <= 0 else (pos < focus - 1) | (pos > focus + window)
            mel, stop, w, st = self._step(self.decoder.prenet(frame), st, memory, processed, mask)
            mels.append(mel)
            stops.append(stop)
            aligns.append(w)
            frame = mel
            focus = int(w[0].argmax())
            if window > 0 and focus < last:
                continue
            dwell += 1
            if window > 0 and last_frames > 0 and dwell > 2 * last_frames:
                truncated = False
                break
            if torch.sigmoid(stop).item() > self.config.stop_threshold:
                truncated = False
                break
        mel_pre = torch.stack(mels, 1)
        return mel_pre, mel_pre + self.postnet(mel_pre), torch.stack(stops, 1), torch.stack(aligns, 1), truncated


def init_acoustic(config: AcousticConfig, seed: int) -> AcousticModel:
    model = AcousticModel(config)
    init_parameters(model, seed)
    model.set_trainable(ACOUSTIC_GROUPS)
    return model


def _tensor(x, dtype) -> Tensor:
    return x.to(dtype) if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def encode_text(params: AcousticModel, bottleneck, speaker) -> Tuple[Tensor, Tensor]:
    """Single utterance: bottleneck [T x D], speaker [S] -> (enc_out, enc_spk) [T x enc_dim]."""
    b = _tensor(bottleneck, params.dtype)
    s = _tensor(speaker, params.dtype)
    if b.ndim != 2 or b.shape[0] < 1:
        raise AcousticError("bottleneck must be a non-empty [T x D] matrix")
    if not (torch.isfinite(b).all() and torch.isfinite(s).all()):
        raise AcousticError("non-finite encoder input")
    enc, enc_spk = params.encode(b[None], s[None], torch.tensor([b.shape[0]]))
    return enc[0], enc_spk[0]


def predict_pitch(params: AcousticModel, enc_spk) -> Tensor:
    return params.pitch_predictor(_tensor(enc_spk, params.dtype)[None])[0]


def predict_duration(params: AcousticModel, enc_spk) -> Tensor:
    return params.duration_predictor(_tensor(enc_spk, params.dtype)[None])[0]


def duration_frames(logdur) -> np.ndarray:
    """Log-durations to integer frame counts, at least one frame each."""
    logdur = logdur.detach().cpu().numpy() if isinstance(logdur, Tensor) else np.asarray(logdur)
    return np.maximum(1, np.round(np.exp(logdur))).astype(np.int64)


def decode_mel(params: AcousticModel, enc_spk, pitch, logdur, mode: str = "teacher", gt_mel=None) -> DecoderOutput:
    """Single-utterance mel decoding in `teacher` or `infer` mode."""
    dt = params.dtype
    enc_spk = _tensor(enc_spk, dt)
    memory = params.memory(enc_spk[None], _tensor(pitch, dt)[None], _tensor(logdur, dt)[None])
    if mode == "teacher":
        if gt_mel is None:
            raise AcousticError("teacher mode needs the ground-truth mel spectrogram")
        pad = torch.zeros(1, memory.shape[1], dtype=torch.bool)
        pre, post, stop, align = params.decode_teacher(memory, pad, _tensor(gt_mel, dt)[None])
        return DecoderOutput(pre[0], post[0], stop[0], align[0])
    if mode == "infer":
        max_frames = params.config.max_frames_ratio * memory.shape[1]
        last = int(duration_frames(_tensor(logdur, dt)[-1:])[0])
        pre, post, stop, align, trunc = params.decode_infer(memory, max_frames, last)
        return DecoderOutput(pre[0], post[0], stop[0], align[0], trunc)
    raise AcousticError(f"unknown decoding mode {mode!r}")


def _masked_mse(pred: Tensor, target: Tensor, mask: Optional[Tensor]) -> Tensor:
    err = (pred - target) ** 2
    if mask is None:
        return err.mean()
    while mask.ndim < err.ndim:
        mask = mask[..., None]
    mask = mask.expand_as(err).to(err.dtype)
    return (err * mask).sum() / mask.sum()


def acoustic_loss(
    outputs: DecoderOutput,
    gt_mel,
    gt_stop,
    gt_pitch,
    gt_logdur,
    pred_pitch,
    pred_logdur,
    weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
    frame_mask: Optional[Tensor] = None,
    phone_mask: Optional[Tensor] = None,
) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Weighted sum of mel (pre + post postnet), stop-token BCE, F0 and duration MSE.

    Masks mark valid (non-padded) frames / phonemes for batched inputs.
    """
    dt = outputs.mel_pre.dtype
    gt_mel, gt_stop = _tensor(gt_mel, dt), _tensor(gt_stop, dt)
    gt_pitch, gt_logdur = _tensor(gt_pitch, dt), _tensor(gt_logdur, dt)
    pred_pitch, pred_logdur = _tensor(pred_pitch, dt), _tensor(pred_logdur, dt)
    if outputs.mel_pre.shape != gt_mel.shape or outputs.mel_post.shape != gt_mel.shape:
        raise AcousticError(f"mel shapes differ: {tuple(outputs.mel_pre.shape)} vs {tuple(gt_mel.shape)}")
    if outputs.stop_logits.shape != gt_stop.shape:
        raise AcousticError("stop-token lengths differ")
    if pred_pitch.shape != gt_pitch.shape or pred_logdur.shape != gt_logdur.shape:
        raise AcousticError("prosody lengths differ")
    alpha, beta, gamma, delta = weights
    mel = _masked_mse(outputs.mel_pre, gt_mel, frame_mask) + _masked_mse(outputs.mel_post, gt_mel, frame_mask)
    bce = F.binary_cross_entropy_with_logits(outputs.stop_logits, gt_stop, reduction="none")
    if frame_mask is not None:
        m = frame_mask.to(dt)
        stop = (bce * m).sum() / m.sum()
    else:
        stop = bce.mean()
    f0 = _masked_mse(pred_pitch, gt_pitch, phone_mask)
    dur = _masked_mse(pred_logdur, gt_logdur, phone_mask)
    total = alpha * mel + beta * stop + gamma * f0 + delta * dur
    return total, {"mel": mel, "stop": stop, "f0": f0, "dur": dur}


def guided_attention_loss(alignment: Tensor, t_len: Tensor, n_len: Tensor, sigma: float = 0.2) -> Tensor:
    """Mean attention mass weighted by 1 - exp(-(t/T - n/N)^2 / 2 sigma^2) over valid cells."""
    b, n, t = alignment.shape
    dt = alignment.dtype
    frames = torch.arange(n, dtype=dt)[None, :, None] / n_len.to(dt)[:, None, None]
    phones = torch.arange(t, dtype=dt)[None, None, :] / t_len.to(dt)[:, None, None]
    penalty = 1.0 - torch.exp(-((phones - frames) ** 2) / (2 * sigma**2))
    valid = (~lengths_to_pad(n_len, n))[:, :, None] & (~lengths_to_pad(t_len, t))[:, None, :]
    return (alignment * penalty * valid.to(dt)).sum() / valid.to(dt).sum()


def acoustic_trainable_mask(stage: str) -> set:
    return mask_for_stage(stage, ACOUSTIC_GROUPS, ACOUSTIC_FINETUNE_GROUPS)


def collate(items: Sequence[AcousticItem], dtype=torch.float32) -> dict:
    t_len = torch.tensor([len(it.bottleneck) for it in items])
    n_len = torch.tensor([len(it.mel) for it in items])
    bt, bn = int(t_len.max()), int(n_len.max())
    b = len(items)
    d = items[0].bottleneck.shape[1]
    batch = {
        "bottleneck": torch.zeros(b, bt, d, dtype=dtype),
        "speaker": torch.as_tensor(np.stack([it.speaker for it in items]), dtype=dtype),
        "mel": torch.zeros(b, bn, items[0].mel.shape[1], dtype=dtype),
        "stop": torch.zeros(b, bn, dtype=dtype),
        "pitch": torch.zeros(b, bt, dtype=dtype),
        "logdur": torch.zeros(b, bt, dtype=dtype),
        "t_len": t_len,
        "n_len": n_len,
    }
    for i, it in enumerate(items):
        t, n = len(it.bottleneck), len(it.mel)
        batch["bottleneck"][i, :t] = torch.as_tensor(it.bottleneck, dtype=dtype)
        batch["mel"][i, :n] = torch.as_tensor(it.mel, dtype=dtype)
        batch["stop"][i, :n] = torch.as_tensor(it.stop, dtype=dtype)
        batch["pitch"][i, :t] = torch.as_tensor(it.pitch, dtype=dtype)
        batch["logdur"][i, :t] = torch.as_tensor(it.logdur, dtype=dtype)
    return batch


def batch_loss(params: AcousticModel, batch: dict, weights=(1.0, 1.0, 1.0, 1.0), guided: float = 0.0, sigma: float = 0.2):
    """Teacher-forced forward pass and loss for a collated batch.

    With `guided` > 0 the diagonal attention prior is added to the total as `attn`.
    """
    t_pad = lengths_to_pad(batch["t_len"], batch["bottleneck"].shape[1])
    n_valid = ~lengths_to_pad(batch["n_len"], batch["mel"].shape[1])
    _, enc_spk = params.encode(batch["bottleneck"], batch["speaker"], batch["t_len"])
    pred_pitch, pred_logdur = params.predict(enc_spk, t_pad)
    memory = params.memory(enc_spk, batch["pitch"], batch["logdur"])
    pre, post, stop, align = params.decode_teacher(memory, t_pad, batch["mel"])
    out = DecoderOutput(pre, post, stop, align)
    total, parts = acoustic_loss(
        out,
        batch["mel"],
        batch["stop"],
        batch["pitch"],
        batch["logdur"],
        pred_pitch,
        pred_logdur,
        weights,
        frame_mask=n_valid,
        phone_mask=~t_pad,
    )
    if guided:
        parts["attn"] = guided_attention_loss(align, batch["t_len"], batch["n_len"], sigma)
        total = total + guided * parts["attn"]
    return total, parts


def train_acoustic(
    params: AcousticModel,
    dataset: Sequence[AcousticItem],
    stage: str,
    hyper: Optional[AcousticHyper] = None,
    progress=None,
) -> Tuple[AcousticModel, List[dict]]:
    """Adam on the stage's trainable groups; returns the final parameters and
    the per-epoch mean loss components."""
    hyper = hyper or AcousticHyper.for_stage(stage)
    if not dataset:
        raise AcousticError("empty acoustic training set")
    params.set_trainable(acoustic_trainable_mask(stage))
    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    trainable = params.trainable_parameters()
    opt = torch.optim.Adam(trainable, lr=hyper.lr)
    history = []
    dataset = list(dataset)
    for epoch in range(1, hyper.epochs + 1):
        params.train()
        order = rng.permutation(len(dataset))
        sums: Dict[str, float] = {}
        n_batches = 0
        for k in range(0, len(order), hyper.batch):
            batch = collate([dataset[i] for i in order[k : k + hyper.batch]], params.dtype)
            total, parts = batch_loss(params, batch, hyper.weights, hyper.guided_attention, hyper.guided_sigma)
            opt.zero_grad()
            total.backward()
            if hyper.grad_clip:
                nn.utils.clip_grad_norm_(trainable, hyper.grad_clip)
            opt.step()
            for name, v in [("total", total)] + list(parts.items()):
                sums[name] = sums.get(name, 0.0) + float(v.detach())
            n_batches += 1
        record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        history.append(record)
        if progress is not None:
            progress(record)
        logger.debug("acoustic %s epoch %d: %s", stage, epoch, record)
    params.eval()
    return params, history


@dataclass
class SynthesisResult:
    mel: np.ndarray
    phonemes: List[int]
    pitch: np.ndarray
    logdur: np.ndarray
    alignment: np.ndarray
    truncated: bool = False

    def durations(self) -> np.ndarray:
        """Frames per phoneme position, counted from the attention argmax."""
        idx = self.alignment.argmax(axis=1)
        return np.bincount(idx, minlength=self.alignment.shape[1])


@torch.no_grad()
def synthesize_from_bottleneck(params: AcousticModel, bottleneck, speaker, phonemes: Sequence[int] = ()) -> SynthesisResult:
    params.eval()
    _, enc_spk = encode_text(params, bottleneck, speaker)
    pitch = predict_pitch(params, enc_spk)
    logdur = predict_duration(params, enc_spk)
    out = decode_mel(params, enc_spk, pitch, logdur, mode="infer")
    return SynthesisResult(
        mel=out.mel_post.double().numpy(),
        phonemes=list(phonemes),
        pitch=pitch.double().numpy(),
        logdur=logdur.double().numpy(),
        alignment=out.alignment.double().numpy(),
        truncated=out.truncated,
    )


def synthesize(g2p_params, acoustic_params: AcousticModel, text: str, accent, speaker, graphemes=None) -> SynthesisResult:
    """Text -> accented phonemes -> bottleneck -> prosody -> mel (free-running)."""
    from .g2p import extract_bottleneck, g2p_decode
    from .lexicon import GraphemeVocab, normalize_text

    graphemes = graphemes or GraphemeVocab()
    g = graphemes.encode(" ".join(normalize_text(text)))
    decoded = g2p_decode(g2p_params, g, accent)
    bottleneck = extract_bottleneck(g2p_params, g, accent, decoded.phonemes)
    res = synthesize_from_bottleneck(acoustic_params, bottleneck, speaker, decoded.phonemes)
    res.truncated = res.truncated or decoded.truncated
    return res
