"""Synthetic accented corpus: rule-based lexicons and harmonic-tone speech with
exact alignments, so every training target is known by construction."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import butter, sosfilt

from ..lexicon import EOS, WB, AccentId, Lexicon, PhonemeInventory
from ..signal import HOP, SAMPLE_RATE, AlignmentSegment, write_alignment, write_wav
from .arrays import write_array, write_jsonl

CONSONANT_LETTERS = ("b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "sh", "ch", "th")
CODA_LETTERS = ("d", "k", "l", "m", "n", "p", "s", "t", "ng", "sh", "r")
VOWEL_LETTERS = ("a", "e", "i", "o", "u", "ee", "oo")

BASE_RULES = {c: [c] for c in ("b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "sh", "ch", "th", "ng")}

# rendered as band-pass noise, everything else as a harmonic tone
UNVOICED = frozenset({"p", "t", "k", "f", "s", "sh", "ch", "th", "h"})


@dataclass
class AccentRules:
    name: str
    vowels: Dict[str, str]
    rhotic: bool = True
    f0_offset: float = 0.0
    duration_scale: float = 1.0


@dataclass
class Speaker:
    name: str
    accent: str
    f0_base: float


@dataclass
class ToyAccentSpec:
    accents: List[AccentRules]
    speakers: List[Speaker]
    target: str
    alphabet: str = "abcdefghijklmnopqrstuvwxyz'"
    base_rules: Dict[str, List[str]] = field(default_factory=lambda: dict(BASE_RULES))
    declination_hz: float = 15.0
    speaker_dim: int = 256

    def accent(self, name: str) -> AccentRules:
        for a in self.accents:
            if a.name == name:
                return a
        raise KeyError(f"unknown toy accent {name!r}")

    def accent_id(self, name: str) -> AccentId:
        return AccentId(self.names.index(name), name)

    @property
    def names(self) -> List[str]:
        return [a.name for a in self.accents]

    @property
    def source_accents(self) -> List[str]:
        return [n for n in self.names if n != self.target]

    def speakers_for(self, accent: str) -> List[Speaker]:
        return [s for s in self.speakers if s.accent == accent]

    def validate(self, inventory: PhonemeInventory) -> "ToyAccentSpec":
        if self.target not in self.names:
            raise ValueError(f"target accent {self.target!r} is not defined")
        for a in self.accents:
            missing = set(VOWEL_LETTERS) - set(a.vowels)
            if missing:
                raise ValueError(f"accent {a.name}: no rule for vowel letters {sorted(missing)}")
            for ph in list(a.vowels.values()) + [p for v in self.base_rules.values() for p in v]:
                if ph not in inventory:
                    raise ValueError(f"accent {a.name}: phoneme {ph!r} not in inventory")
            if not self.speakers_for(a.name):
                raise ValueError(f"accent {a.name} has no speaker")
        target = self.accent(self.target)
        if all(target.vowels == a.vowels and target.rhotic == a.rhotic for a in self.accents if a.name != self.target):
            raise ValueError("target accent rules do not differ from any source accent")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def default_spec() -> ToyAccentSpec:
    """Two source accents and one target with a large F0 and tempo shift."""
    return ToyAccentSpec(
        accents=[
            AccentRules("gam", dict(a="ae", e="eh", i="ih", o="aa", u="ah", ee="iy", oo="uw"), True, 0.0, 1.0),
            AccentRules("rp", dict(a="ae", e="e", i="ih", o="oh", u="uh", ee="ii", oo="uu"), False, 10.0, 1.1),
            AccentRules("scot", dict(a="a", e="eh", i="ih", o="o", u="uh", ee="ii", oo="uu"), True, 60.0, 1.3),
        ],
        speakers=[
            Speaker("gam1", "gam", 100.0),
            Speaker("gam2", "gam", 125.0),
            Speaker("rp1", "rp", 105.0),
            Speaker("rp2", "rp", 120.0),
            Speaker("scot1", "scot", 110.0),
            Speaker("scot2", "scot", 120.0),
        ],
        target="scot",
    )


def _tokenize(word: str) -> List[str]:
    """Greedy longest-match split into rule units (digraphs first)."""
    units, k = [], 0
    while k < len(word):
        two = word[k : k + 2]
        if two in ("sh", "ch", "th", "ng", "ee", "oo"):
            units.append(two)
            k += 2
        else:
            units.append(word[k])
            k += 1
    return units


def transcribe(word: str, rules: AccentRules, base: Dict[str, List[str]]) -> List[str]:
    units = _tokenize(word)
    out: List[str] = []
    for k, u in enumerate(units):
        if u in rules.vowels:
            out.append(rules.vowels[u])
        elif u == "r" and not rules.rhotic and not (k + 1 < len(units) and units[k + 1] in VOWEL_LETTERS):
            continue  # non-rhotic: r only before a vowel
        else:
            out.extend(base[u])
    return out


def make_words(n: int, rng: np.random.Generator) -> List[str]:
    words: List[str] = []
    seen = set()
    while len(words) < n:
        syll = []
        for _ in range(int(rng.integers(1, 3))):
            s = CONSONANT_LETTERS[rng.integers(len(CONSONANT_LETTERS))] + VOWEL_LETTERS[rng.integers(len(VOWEL_LETTERS))]
            if rng.random() < 0.5:
                s += CODA_LETTERS[rng.integers(len(CODA_LETTERS))]
            syll.append(s)
        w = "".join(syll)
        # the tokenizer must recover the syllable units unambiguously
        if w in seen or sum(len(_tokenize(s)) for s in syll) != len(_tokenize(w)):
            continue
        seen.add(w)
        words.append(w)
    return words


def build_lexicons(spec: ToyAccentSpec, words: Sequence[str]) -> Dict[str, Lexicon]:
    return {
        a.name: Lexicon(spec.accent_id(a.name), {w: transcribe(w, a, spec.base_rules) for w in words})
        for a in spec.accents
    }


def _stable(symbol: str, salt: str) -> float:
    """Deterministic value in [0, 1) per symbol, independent of any RNG state."""
    return (zlib.crc32(f"{salt}:{symbol}".encode()) % 10007) / 10007.0


def base_frames(symbol: str, inventory: PhonemeInventory) -> float:
    if symbol == WB:
        return 3.0
    if symbol == EOS:
        return 4.0
    if inventory.is_vowel(symbol):
        return 7.0 + 2.0 * _stable(symbol, "dur")
    return 4.0 + 2.0 * _stable(symbol, "dur")


def segment_frames(symbol: str, scale: float, inventory: PhonemeInventory) -> int:
    return max(1, int(round(base_frames(symbol, inventory) * scale)))


def phoneme_f0_delta(symbol: str) -> float:
    return -10.0 + 20.0 * _stable(symbol, "f0")


def is_voiced_symbol(symbol: str) -> bool:
    return symbol not in UNVOICED and symbol not in (WB, EOS)


@dataclass
class RenderedUtterance:
    wave: np.ndarray
    segments: List[AlignmentSegment]
    f0: List[float]  # intended F0 per segment, 0 for unvoiced


def render_utterance(
    symbols: Sequence[str],
    accent: AccentRules,
    speaker: Speaker,
    inventory: PhonemeInventory,
    rng: np.random.Generator,
    declination_hz: float = 15.0,
) -> RenderedUtterance:
    """Concatenate phoneme tones; `symbols` holds words joined by WB and ends in EOS.

    Segment k covers frames [start, end) and the samples whose nearest frame
    centre lies inside it, so the mel frame grid matches the alignment exactly.
    """
    frames = [segment_frames(s, accent.duration_scale, inventory) for s in symbols]
    bounds = np.concatenate([[0], np.cumsum(frames)])
    total = int(bounds[-1])
    n_samples = total * HOP - HOP // 2
    edges = np.clip(bounds * HOP - HOP // 2, 0, n_samples)
    wave = np.zeros(n_samples)
    f0_track = np.zeros(n_samples)
    amp1 = np.zeros(n_samples)
    amp2 = np.zeros(n_samples)
    segs, f0s = [], []
    for k, sym in enumerate(symbols):
        a, b = int(edges[k]), int(edges[k + 1])
        segs.append(AlignmentSegment(inventory.index(sym), int(bounds[k]), int(bounds[k + 1])))
        if is_voiced_symbol(sym):
            f0 = speaker.f0_base + accent.f0_offset + phoneme_f0_delta(sym) - declination_hz * bounds[k] / total
            level = 0.35 if inventory.is_vowel(sym) else 0.15
            f0_track[a:b] = f0
            amp1[a:b] = level
            amp2[a:b] = level * (0.2 + 0.8 * _stable(sym, "tilt"))
            f0s.append(float(f0))
        else:
            f0s.append(0.0)
            if sym in UNVOICED:
                centre = 1500.0 + 5000.0 * _stable(sym, "band")
                sos = butter(2, [centre / 1.3, min(centre * 1.3, 7900.0)], btype="band", fs=SAMPLE_RATE, output="sos")
                noise = sosfilt(sos, rng.standard_normal(b - a + 256))[256:]
                wave[a:b] += 0.12 * noise / (np.std(noise) + 1e-12)
            else:
                wave[a:b] += 0.01 * rng.standard_normal(b - a)
    # phase accumulates across segments so voiced transitions stay continuous
    phase = 2 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE
    ramp = np.ones(64) / 64
    amp1 = np.convolve(amp1, ramp, mode="same")
    amp2 = np.convolve(amp2, ramp, mode="same")
    wave += amp1 * np.sin(phase) + amp2 * np.sin(2 * phase)
    wave += 1e-3 * rng.standard_normal(n_samples)
    return RenderedUtterance(wave, segs, f0s)


@dataclass
class ToySizes:
    words: int = 300
    utterances: Dict[str, int] = field(default_factory=lambda: {"gam": 40, "rp": 40, "scot": 40})
    words_per_utt: Tuple[int, int] = (2, 3)


def speaker_embedding(name: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.standard_normal(dim) / np.sqrt(dim) * 4.0


def make_toy_corpus(spec: ToyAccentSpec, sizes: ToySizes, seed: int, out_dir) -> Path:
    """Write lexicons, word frequencies, WAVs, alignments, speaker embeddings and
    manifests under `out_dir`. Output bytes depend only on the arguments."""
    inventory = PhonemeInventory.default()
    spec.validate(inventory)
    out = Path(out_dir)
    for sub in ("lexicons", "wav", "align", "speakers"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    words = make_words(sizes.words, rng)
    lexicons = build_lexicons(spec, words)
    for name, lex in lexicons.items():
        lex.save(out / "lexicons" / f"{name}.tsv")
    inventory.save(out / "phonemes.tsv")
    # Zipf-like counts with the word list order as the rank
    with open(out / "frequencies.tsv", "w", encoding="utf-8") as fh:
        for rank, w in enumerate(words, 1):
            fh.write(f"{w}\t{int(100000 / rank)}\n")
    for spk in spec.speakers:
        write_array(out / "speakers" / f"{spk.name}.f32", speaker_embedding(spk.name, spec.speaker_dim, seed))

    records = []
    for a_idx, accent in enumerate(spec.accents):
        count = sizes.utterances.get(accent.name, 0)
        speakers = spec.speakers_for(accent.name)
        for k in range(count):
            urng = np.random.default_rng([seed, a_idx, k])
            n_words = int(urng.integers(sizes.words_per_utt[0], sizes.words_per_utt[1] + 1))
            text = " ".join(words[i] for i in urng.choice(len(words), n_words, replace=False))
            speaker = speakers[k % len(speakers)]
            symbols: List[str] = []
            for j, w in enumerate(text.split()):
                if j:
                    symbols.append(WB)
                symbols.extend(lexicons[accent.name][w])
            symbols.append(EOS)
            utt = render_utterance(symbols, accent, speaker, inventory, urng, spec.declination_hz)
            utt_id = f"{accent.name}_{k:04d}"
            write_wav(out / "wav" / f"{utt_id}.wav", utt.wave)
            write_alignment(out / "align" / f"{utt_id}.tsv", utt.segments, inventory)
            records.append(
                {
                    "utt_id": utt_id,
                    "accent": accent.name,
                    "accent_id": a_idx,
                    "speaker": speaker.name,
                    "text": text,
                    "wav": f"wav/{utt_id}.wav",
                    "alignment": f"align/{utt_id}.tsv",
                    "speaker_path": f"speakers/{speaker.name}.f32",
                    "segment_f0": [round(f, 6) for f in utt.f0],
                }
            )
    write_jsonl(out / "utterances.jsonl", records)
    meta = {"seed": seed, "spec": spec.to_dict(), "sizes": asdict(sizes), "words": words}
    (out / "toy_spec.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_toy_spec(path) -> Tuple[ToyAccentSpec, ToySizes, int, List[str]]:
    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    s = meta["spec"]
    spec = ToyAccentSpec(
        accents=[AccentRules(**a) for a in s["accents"]],
        speakers=[Speaker(**sp) for sp in s["speakers"]],
        target=s["target"],
        alphabet=s["alphabet"],
        base_rules=s["base_rules"],
        declination_hz=s["declination_hz"],
        speaker_dim=s["speaker_dim"],
    )
    z = meta["sizes"]
    sizes = ToySizes(z["words"], z["utterances"], tuple(z["words_per_utt"]))
    return spec, sizes, meta["seed"], meta["words"]
