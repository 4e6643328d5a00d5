"""Per-accent phonetic lexicons, lexicon comparison and G2P corpus assembly."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

PAD, BOS, EOS, WB = "<pad>", "<s>", "</s>", "<wb>"
SPECIAL_SYMBOLS = (PAD, BOS, EOS, WB)

# 42 vowels + 36 consonants; with the 4 specials this gives the 82-way G2P output.
DEFAULT_VOWELS = (
    "a aa ae ah ai ar au aw e ea ee eh ei eir er i ia ih ii ir iy "
    "o oh oi oo or ou ow u ua uh ur uu uw @ @@ @r ax ex oa ay ey"
).split()
DEFAULT_CONSONANTS = (
    "p b t d k g ch jh f v th dh s z sh zh h m n ng l r y w x hw "
    "t^ ? l= m= n= r= ll lw rr nj"
).split()

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz'"


class LexiconError(ValueError):
    pass


class PhonemeInventory:
    """Unified phoneme symbol table shared by every accent.

    Indices 0..3 are PAD, BOS, EOS and WB; phoneme symbols follow in order.
    """

    def __init__(self, symbols: Sequence[str], vowels: Iterable[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise LexiconError("phoneme symbols must be unique")
        clash = set(symbols) & set(SPECIAL_SYMBOLS)
        if clash:
            raise LexiconError(f"phoneme symbols clash with specials: {sorted(clash)}")
        vowel_set = frozenset(vowels)
        if not vowel_set <= set(symbols):
            raise LexiconError(f"vowels not in inventory: {sorted(vowel_set - set(symbols))}")
        self.symbols = symbols
        self.vowel_set = vowel_set
        self.itos = list(SPECIAL_SYMBOLS) + symbols
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    wb = property(lambda self: 3)

    @property
    def specials(self) -> Dict[str, int]:
        return {"pad": 0, "bos": 1, "eos": 2, "wb": 3}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.stoi and self.stoi[symbol] >= len(SPECIAL_SYMBOLS)

    def index(self, symbol: str) -> int:
        return self.stoi[symbol]

    def encode(self, symbols: Sequence[str]) -> List[int]:
        return [self.stoi[s] for s in symbols]

    def decode(self, indices: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in indices]

    def is_vowel(self, symbol: str) -> bool:
        return symbol in self.vowel_set

    @classmethod
    def default(cls) -> "PhonemeInventory":
        return cls(DEFAULT_VOWELS + DEFAULT_CONSONANTS, DEFAULT_VOWELS)

    @classmethod
    def load(cls, path) -> "PhonemeInventory":
        """Read a `symbol<TAB>vowel|consonant` table."""
        symbols, vowels = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            sym, kind = line.split("\t")
            symbols.append(sym)
            if kind.strip() == "vowel":
                vowels.append(sym)
        return cls(symbols, vowels)

    def save(self, path) -> None:
        lines = [f"{s}\t{'vowel' if s in self.vowel_set else 'consonant'}" for s in self.symbols]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class GraphemeVocab:
    """Character table for G2P input; index 0 is PAD, index 1 is the space."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        self.itos = [PAD, " "] + list(alphabet)
        self.stoi = {c: i for i, c in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> List[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as exc:
            raise LexiconError(f"character {exc.args[0]!r} not in grapheme vocabulary") from None

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.itos[i] for i in indices)

    def covers(self, text: str) -> bool:
        return all(c in self.stoi for c in text)


@dataclass(frozen=True)
class AccentId:
    id: int
    name: str


@dataclass
class Lexicon:
    accent: AccentId
    entries: Dict[str, List[str]]
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> List[str]:
        return self.entries[word]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for word, phones in self.entries.items():
                fh.write(f"{word}\t{' '.join(phones)}\n")


@dataclass
class LexiconDiffStats:
    shared_word_pct: float
    accented_word_pct: float
    vowel_variation_pct: float
    consonant_variation_pct: float
    common_words: int = 0


@dataclass
class G2PExample:
    graphemes: List[int]
    phonemes: List[int]
    accent: AccentId
    text: str = ""


@dataclass
class CorpusDrops:
    out_of_vocabulary: int = 0
    length: int = 0

    @property
    def total(self) -> int:
        return self.out_of_vocabulary + self.length


def load_lexicon(path, accent: AccentId, inventory: PhonemeInventory) -> Lexicon:
    """Parse a `word<TAB>ph ph ...` lexicon; first occurrence of a word wins."""
    entries: Dict[str, List[str]] = {}
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise LexiconError(f"{path}:{lineno}: expected word<TAB>phonemes")
            word, trans = line.split("\t", 1)
            word = word.strip().lower()
            phones = trans.split()
            if not word or not phones:
                raise LexiconError(f"{path}:{lineno}: empty word or transcription")
            for p in phones:
                if p not in inventory:
                    raise LexiconError(f"{path}:{lineno}: unknown phoneme {p!r}")
            if word in entries:
                duplicates += 1
                continue
            entries[word] = phones
    if not entries:
        raise LexiconError(f"{path}: empty lexicon")
    if duplicates:
        logger.warning("%s: %d duplicate word(s) ignored", path, duplicates)
    return Lexicon(accent, entries, duplicates)


def load_frequencies(path) -> Dict[str, int]:
    freq = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                word, count = line.rstrip("\n").split("\t")
                freq[word.lower()] = int(count)
    return freq


def subset_by_frequency(lex: Lexicon, freq: Mapping[str, int], k: int) -> Lexicon:
    """Keep the `k` most frequent words of `lex` that appear in `freq`.

    Ties are broken by ascending word order so the subset is reproducible.
    """
    if k < 1:
        raise ValueError("k must be positive")
    ranked = sorted((w for w in lex.entries if w in freq), key=lambda w: (-freq[w], w))
    keep = set(ranked[:k])
    entries = {w: list(p) for w, p in lex.entries.items() if w in keep}
    return Lexicon(lex.accent, entries)


def _align_ops(ref: Sequence[str], hyp: Sequence[str]) -> List[Tuple[str, Optional[int], Optional[str]]]:
    """Unit-cost Levenshtein alignment as a list of (op, ref_pos, hyp_symbol).

    Backtrace prefers match/substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            # insertion sits between ref positions i-1 and i
            ops.append(("ins", i, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def _touched_positions(ref: Sequence[str], hyp: Sequence[str], is_vowel) -> Tuple[set, set]:
    vowel_pos, cons_pos = set(), set()
    for op, pos, sym in _align_ops(ref, hyp):
        if op == "match":
            continue
        if op in ("sub", "del"):
            (vowel_pos if is_vowel(ref[pos]) else cons_pos).add(pos)
            continue
        # an insertion is charged to the nearest reference position of its own class
        want = is_vowel(sym)
        candidates = [k for k in range(len(ref)) if is_vowel(ref[k]) == want]
        if not candidates:
            continue
        before = pos - 0.5
        target = min(candidates, key=lambda k: (abs(k - before), k > before))
        (vowel_pos if want else cons_pos).add(target)
    return vowel_pos, cons_pos


def compare_lexicons(a: Lexicon, b: Lexicon, inventory: PhonemeInventory) -> LexiconDiffStats:
    """Shared/accented word rates and vowel/consonant variation of `b` against `a`.

    Variation counts the distinct reference-side positions touched by a minimal
    edit alignment, per phoneme class, over the accented words only.
    """
    common = sorted(set(a.entries) & set(b.entries))
    if not common:
        raise LexiconError("lexicons share no words")
    accented = [w for w in common if a.entries[w] != b.entries[w]]
    n_vowel = n_cons = touched_v = touched_c = 0
    for w in accented:
        ref, hyp = a.entries[w], b.entries[w]
        v, c = _touched_positions(ref, hyp, inventory.is_vowel)
        touched_v += len(v)
        touched_c += len(c)
        n_vowel += sum(inventory.is_vowel(p) for p in ref)
        n_cons += sum(not inventory.is_vowel(p) for p in ref)
    accented_pct = 100.0 * len(accented) / len(common)
    return LexiconDiffStats(
        shared_word_pct=100.0 - accented_pct if accented else 100.0,
        accented_word_pct=accented_pct,
        vowel_variation_pct=100.0 * touched_v / n_vowel if n_vowel else 0.0,
        consonant_variation_pct=100.0 * touched_c / n_cons if n_cons else 0.0,
        common_words=len(common),
    )


_PUNCT = re.compile(r"[^\w\s']|_")


def normalize_text(text: str) -> List[str]:
    """Lowercase, strip punctuation (apostrophes inside words survive), split."""
    words = _PUNCT.sub(" ", text.lower()).split()
    return [w.strip("'") for w in words if w.strip("'")]


def phonemes_for_words(words: Sequence[str], lex: Lexicon, inventory: PhonemeInventory) -> List[int]:
    """BOS + word transcriptions joined by WB + EOS."""
    seq = [inventory.bos]
    for k, w in enumerate(words):
        if k:
            seq.append(inventory.wb)
        seq.extend(inventory.encode(lex.entries[w]))
    seq.append(inventory.eos)
    return seq


def split_words(phonemes: Sequence[int], inventory: PhonemeInventory) -> List[List[int]]:
    """Split a phoneme index sequence at WB tokens, ignoring BOS/EOS/PAD."""
    words: List[List[int]] = [[]]
    for p in phonemes:
        if p == inventory.wb:
            words.append([])
        elif p not in (inventory.pad, inventory.bos, inventory.eos):
            words[-1].append(p)
    return words


def build_g2p_corpus(
    texts: Sequence[str],
    lex: Lexicon,
    accent: AccentId,
    inventory: PhonemeInventory,
    graphemes: Optional[GraphemeVocab] = None,
    len_bounds: Tuple[int, int] = (10, 200),
) -> Tuple[List[G2PExample], CorpusDrops]:
    """Turn sentences into utterance-level G2P examples.

    Sentences whose normalized length falls outside `len_bounds` (inclusive) or
    that contain any word missing from `lex` are dropped and counted.
    """
    graphemes = graphemes or GraphemeVocab()
    lo, hi = len_bounds
    examples, drops = [], CorpusDrops()
    for text in texts:
        words = normalize_text(text)
        sentence = " ".join(words)
        if not words or not lo <= len(sentence) <= hi:
            drops.length += 1
            continue
        if any(w not in lex.entries for w in words) or not graphemes.covers(sentence):
            drops.out_of_vocabulary += 1
            continue
        examples.append(
            G2PExample(
                graphemes=graphemes.encode(sentence),
                phonemes=phonemes_for_words(words, lex, inventory),
                accent=accent,
                text=sentence,
            )
        )
    if drops.total:
        logger.info("dropped %d sentence(s): %d OOV, %d length", drops.total, drops.out_of_vocabulary, drops.length)
    if not examples:
        raise LexiconError("no sentence survived corpus filtering")
    return examples, drops


def write_corpus_manifest(examples: Sequence[G2PExample], path, prefix: str = "utt") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, ex in enumerate(examples):
            rec = {
                "id": f"{prefix}{k:05d}",
                "grapheme_indices": ex.graphemes,
                "phoneme_indices": ex.phonemes,
                "accent_id": ex.accent.id,
            }
            fh.write(json.dumps(rec) + "\n")


def read_corpus_manifest(path, accents: Mapping[int, AccentId]) -> List[G2PExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(G2PExample(rec["grapheme_indices"], rec["phoneme_indices"], accents[rec["accent_id"]]))
    return out
