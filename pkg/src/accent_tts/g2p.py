"""Accent-conditioned transformer grapheme-to-phoneme model."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lexicon import AccentId, G2PExample
from .params import ParameterStore, init_parameters, mask_for_stage

logger = logging.getLogger(__name__)

PAD_INDEX, BOS_INDEX, EOS_INDEX, WB_INDEX = 0, 1, 2, 3

G2P_GROUPS = (
    "grapheme_embedding",
    "encoder_stack",
    "prenet_phoneme_embedding",
    "prenet_accent_embedding",
    "prenet_projection",
    "decoder_stack",
    "output_projection",
)
G2P_FINETUNE_GROUPS = (
    "prenet_accent_embedding",
    "prenet_phoneme_embedding",
    "prenet_projection",
    "output_projection",
)


class G2PError(ValueError):
    pass


@dataclass
class G2PConfig:
    grapheme_vocab: int
    accent_table_size: int
    phoneme_vocab: int = 82
    model_dim: int = 256
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 8
    ff_dim: int = 512
    dropout: float = 0.1
    accent_dim: int = 32
    max_decode_len: int = 200
    max_positions: int = 512

    def validate(self) -> "G2PConfig":
        if self.model_dim % self.heads:
            raise G2PError("model_dim must be divisible by heads")
        if min(self.grapheme_vocab, self.accent_table_size, self.phoneme_vocab) < 1:
            raise G2PError("vocabulary and accent table sizes must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class G2PHyper:
    lr: float = 5e-4
    batch: int = 128
    epochs: int = 100
    seed: int = 0


@dataclass
class DecodeResult:
    phonemes: List[int]
    truncated: bool = False


def sinusoid_table(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * rate)
    table[:, 1::2] = torch.cos(pos * rate[: dim // 2])
    return table


class G2PModel(ParameterStore):
    GROUPS = G2P_GROUPS

    def __init__(self, config: G2PConfig):
        super().__init__()
        c = self.config = config.validate()
        d = c.model_dim
        self.grapheme_embedding = nn.Embedding(c.grapheme_vocab, d)
        self.encoder_stack = nn.ModuleList(
            nn.TransformerEncoderLayer(d, c.heads, c.ff_dim, c.dropout, batch_first=True) for _ in range(c.encoder_layers)
        )
        self.prenet_phoneme_embedding = nn.Embedding(c.phoneme_vocab, d)
        self.prenet_accent_embedding = nn.Embedding(c.accent_table_size, c.accent_dim)
        self.prenet_projection = nn.Linear(d + c.accent_dim, d)
        self.decoder_stack = nn.ModuleList(
            nn.TransformerDecoderLayer(d, c.heads, c.ff_dim, c.dropout, batch_first=True) for _ in range(c.decoder_layers)
        )
        self.output_projection = nn.Linear(d, c.phoneme_vocab)
        self.dropout = nn.Dropout(c.dropout)
        self.register_buffer("positions", sinusoid_table(c.max_positions, d).float(), persistent=False)

    def _check(self, idx: torch.Tensor, vocab: int, what: str) -> None:
        if idx.numel() and (idx.min() < 0 or idx.max() >= vocab):
            raise G2PError(f"{what} index out of vocabulary")

    def encode(self, graphemes: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """[B, S] grapheme ids -> ([B, S, D] memory, [B, S] padding mask)."""
        if graphemes.shape[1] == 0:
            raise G2PError("empty grapheme sequence")
        self._check(graphemes, self.config.grapheme_vocab, "grapheme")
        pad = graphemes == PAD_INDEX
        x = self.grapheme_embedding(graphemes) + self.positions[: graphemes.shape[1]].to(self.grapheme_embedding.weight.dtype)
        x = self.dropout(x)
        for layer in self.encoder_stack:
            x = layer(x, src_key_padding_mask=pad)
        return x, pad

    def decode_hidden(
        self, memory: torch.Tensor, memory_pad: torch.Tensor, phonemes_in: torch.Tensor, accent: torch.Tensor
    ) -> torch.Tensor:
        """Final decoder-layer states [B, T, D] for BOS-shifted phoneme inputs."""
        self._check(phonemes_in, self.config.phoneme_vocab, "phoneme")
        self._check(accent, self.config.accent_table_size, "accent")
        b, t = phonemes_in.shape
        emb = self.prenet_phoneme_embedding(phonemes_in)
        acc = self.prenet_accent_embedding(accent)[:, None, :].expand(b, t, -1)
        x = self.prenet_projection(torch.cat([emb, acc], dim=-1)) + self.positions[:t].to(emb.dtype)
        x = self.dropout(x)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        pad = phonemes_in == PAD_INDEX
        for layer in self.decoder_stack:
            x = layer(
                x, memory, tgt_mask=causal, tgt_key_padding_mask=pad, memory_key_padding_mask=memory_pad
            )
        return x

    def forward(self, graphemes: torch.Tensor, phonemes_in: torch.Tensor, accent: torch.Tensor) -> torch.Tensor:
        memory, mpad = self.encode(graphemes)
        return self.output_projection(self.decode_hidden(memory, mpad, phonemes_in, accent))


def _accent_index(accent: Union[AccentId, int]) -> int:
    return accent.id if isinstance(accent, AccentId) else int(accent)


def _as_batch(seq: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(list(seq), dtype=torch.long)[None, :]


def init_g2p(config: G2PConfig, seed: int) -> G2PModel:
    model = G2PModel(config)
    init_parameters(model, seed)
    model.set_trainable(G2P_GROUPS)
    return model


def g2p_forward(params: G2PModel, graphemes: Sequence[int], phonemes_in: Sequence[int], accent) -> torch.Tensor:
    """Teacher-forced logits [T x phoneme_vocab] for one utterance."""
    if len(graphemes) == 0:
        raise G2PError("empty grapheme sequence")
    acc = torch.tensor([_accent_index(accent)])
    return params(_as_batch(graphemes), _as_batch(phonemes_in), acc)[0]


def g2p_loss(logits: torch.Tensor, targets, pad_index: int = PAD_INDEX) -> torch.Tensor:
    """Mean token cross-entropy over non-PAD target positions."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:-1] != targets.shape:
        raise G2PError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if bool((targets == pad_index).all()):
        raise G2PError("every target position is padding")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad_index)


@torch.no_grad()
def g2p_decode_batch(params: G2PModel, graphemes: Sequence[Sequence[int]], accents: Sequence, max_len: Optional[int] = None) -> List[DecodeResult]:
    """Greedy autoregressive decoding from BOS for a batch of utterances."""
    max_len = max_len or params.config.max_decode_len
    was_training = params.training
    params.eval()
    try:
        g = _pad([list(x) for x in graphemes])
        acc = torch.tensor([_accent_index(a) for a in accents])
        memory, mpad = params.encode(g)
        b = g.shape[0]
        seq = torch.full((b, 1), BOS_INDEX, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(max_len + 1):
            h = params.decode_hidden(memory, mpad, seq, acc)
            nxt = params.output_projection(h[:, -1]).argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_INDEX), nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == EOS_INDEX
            if bool(done.all()):
                break
    finally:
        params.train(was_training)
    out = []
    for row in seq[:, 1:].tolist():
        if EOS_INDEX in row:
            out.append(DecodeResult(row[: row.index(EOS_INDEX)], False))
        else:
            out.append(DecodeResult([p for p in row if p != PAD_INDEX][:max_len], True))
    return out


def g2p_decode(params: G2PModel, graphemes: Sequence[int], accent, max_len: Optional[int] = None) -> DecodeResult:
    if len(graphemes) == 0:
        raise G2PError("empty grapheme sequence")
    return g2p_decode_batch(params, [graphemes], [accent], max_len)[0]


def extract_bottleneck(params: G2PModel, graphemes: Sequence[int], accent, phonemes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Final decoder-layer states, one row per emitted step.

    `phonemes` (without BOS/EOS) selects the teacher-forced path and yields
    len(phonemes) + 1 rows, the last being the EOS step. Without it the
    sequence is decoded greedily first.
    """
    truncated = False
    if phonemes is None:
        res = g2p_decode(params, graphemes, accent)
        phonemes, truncated = res.phonemes, res.truncated
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            memory, mpad = params.encode(_as_batch(graphemes))
            h = params.decode_hidden(memory, mpad, _as_batch([BOS_INDEX] + list(phonemes)), torch.tensor([_accent_index(accent)]))[0]
    finally:
        params.train(was_training)
    if truncated:
        h = h[:-1]
    return h.double().numpy()


def g2p_trainable_mask(stage: str) -> set:
    return mask_for_stage(stage, G2P_GROUPS, G2P_FINETUNE_GROUPS)


def _pad(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_INDEX, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def collate(batch: Sequence[G2PExample]):
    g = _pad([ex.graphemes for ex in batch])
    p = _pad([ex.phonemes for ex in batch])
    acc = torch.tensor([ex.accent.id for ex in batch])
    return g, p[:, :-1], p[:, 1:], acc


def corpus_loss(params: G2PModel, corpus: Sequence[G2PExample], batch: int = 256) -> float:
    """Token-weighted mean cross-entropy in eval mode."""
    was_training = params.training
    params.eval()
    total, count = 0.0, 0
    try:
        with torch.no_grad():
            for k in range(0, len(corpus), batch):
                g, pin, pout, acc = collate(corpus[k : k + batch])
                logits = params(g, pin, acc)
                n = int((pout != PAD_INDEX).sum())
                total += float(g2p_loss(logits, pout)) * n
                count += n
    finally:
        params.train(was_training)
    return total / count


def train_g2p(
    params: G2PModel,
    corpus: Sequence[G2PExample],
    stage: str,
    hyper: Optional[G2PHyper] = None,
    validation: Optional[Sequence[G2PExample]] = None,
) -> Tuple[G2PModel, List[dict]]:
    """Adam training of the groups allowed by `stage`, teacher-forced throughout.

    Returns the epoch with the lowest validation loss (training loss when no
    validation set is given) and the per-epoch history.
    """
    hyper = hyper or G2PHyper()
    if not corpus:
        raise G2PError("empty training corpus")
    params.set_trainable(g2p_trainable_mask(stage))
    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    opt = torch.optim.Adam(params.trainable_parameters(), lr=hyper.lr)
    history: List[dict] = []
    best_loss, best_state = float("inf"), None
    corpus = list(corpus)
    for epoch in range(1, hyper.epochs + 1):
        params.train()
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for k in range(0, len(order), hyper.batch):
            g, pin, pout, acc = collate([corpus[i] for i in order[k : k + hyper.batch]])
            loss = g2p_loss(params(g, pin, acc), pout)
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = int((pout != PAD_INDEX).sum())
            total += float(loss.detach()) * n
            count += n
        record = {"epoch": epoch, "train_loss": total / count}
        if validation:
            record["val_loss"] = corpus_loss(params, validation)
        history.append(record)
        score = record.get("val_loss", record["train_loss"])
        if score < best_loss:
            best_loss, best_state = score, copy.deepcopy(params.state_dict())
        logger.debug("g2p %s epoch %d: %s", stage, epoch, record)
    params.load_state_dict(best_state)
    params.eval()
    return params, history
