"""Stage orchestration: G2P and acoustic pre-training / fine-tuning, synthesis and
objective evaluation on a toy corpus directory."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .. import metrics
from ..acoustic import AcousticItem, init_acoustic, synthesize, train_acoustic
from ..g2p import G2PConfig, extract_bottleneck, g2p_decode_batch, init_g2p, train_g2p
from ..lexicon import (
    AccentId,
    G2PExample,
    GraphemeVocab,
    Lexicon,
    PhonemeInventory,
    build_g2p_corpus,
    compare_lexicons,
    load_frequencies,
    load_lexicon,
    phonemes_for_words,
    subset_by_frequency,
)
from ..signal import (
    WIN,
    durations_from_alignment,
    estimate_f0,
    f0_stats_and_normalize,
    interpolate_unvoiced,
    invert_mel,
    mel_spectrogram,
    phoneme_average_f0,
    read_alignment,
    read_wav,
    write_wav,
)
from .arrays import read_array, read_jsonl, write_array, write_jsonl
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .toy import ToyAccentSpec, load_toy_spec

logger = logging.getLogger(__name__)

STAGES = (
    "lexicon-stats",
    "pretrain-g2p",
    "finetune-g2p",
    "eval-g2p",
    "pretrain-tts",
    "finetune-tts",
    "synthesize",
    "evaluate",
)
SYSTEMS = ("pretrained", "finetuned")
EVAL_COLUMNS = metrics.TABLE_COLUMNS + ("kld",)


@dataclass
class Corpus:
    root: Path
    spec: ToyAccentSpec
    inventory: PhonemeInventory
    graphemes: GraphemeVocab
    lexicons: Dict[str, Lexicon]
    frequencies: Dict[str, int]
    utterances: List[dict]

    def accent_id(self, name: str) -> AccentId:
        return self.spec.accent_id(name)

    def utterances_for(self, accent: str) -> List[dict]:
        return [u for u in self.utterances if u["accent"] == accent]


def load_corpus(root) -> Corpus:
    root = Path(root)
    spec, _, _, _ = load_toy_spec(root / "toy_spec.json")
    inventory = PhonemeInventory.load(root / "phonemes.tsv")
    lexicons = {
        name: load_lexicon(root / "lexicons" / f"{name}.tsv", spec.accent_id(name), inventory) for name in spec.names
    }
    return Corpus(
        root=root,
        spec=spec,
        inventory=inventory,
        graphemes=GraphemeVocab(spec.alphabet),
        lexicons=lexicons,
        frequencies=load_frequencies(root / "frequencies.tsv"),
        utterances=sorted(read_jsonl(root / "utterances.jsonl"), key=lambda u: u["utt_id"]),
    )


# ----------------------------------------------------------------------------- data splits


@dataclass
class WordSplit:
    pretrain: List[str]
    finetune: List[str]
    heldout: List[str]


def word_split(corpus: Corpus, cfg: RunConfig) -> WordSplit:
    """Most frequent words pre-train and fine-tune; the rarest words past the
    pre-training set are held out for accent-transfer evaluation."""
    d = cfg.data
    ranked = list(subset_by_frequency(corpus.lexicons[corpus.spec.target], corpus.frequencies, 10**9).entries)
    if d.pretrain_words + d.heldout_words > len(ranked) or d.finetune_words > len(ranked):
        raise ConfigError(f"toy lexicon has {len(ranked)} words; the requested word split does not fit")
    return WordSplit(ranked[: d.pretrain_words], ranked[: d.finetune_words], ranked[len(ranked) - d.heldout_words :])


def utterance_split(corpus: Corpus, cfg: RunConfig) -> Dict[str, List[dict]]:
    d = cfg.data
    pre = []
    for name in corpus.spec.source_accents:
        utts = corpus.utterances_for(name)
        pre.extend(utts[: d.pretrain_utts] if d.pretrain_utts else utts)
    target = corpus.utterances_for(corpus.spec.target)
    if d.finetune_utts + d.test_utts > len(target):
        raise ConfigError(f"{len(target)} target utterances cannot cover {d.finetune_utts} fine-tune + {d.test_utts} test")
    return {
        "pretrain": pre,
        "finetune": target[: d.finetune_utts],
        "test": target[d.finetune_utts : d.finetune_utts + d.test_utts],
    }


def g2p_examples(corpus: Corpus, accent: str, words: Sequence[str], n_phrases: int, seed: int) -> List[G2PExample]:
    """Single words plus two-word phrases, so word boundaries are seen in training."""
    rng = np.random.default_rng([seed, corpus.accent_id(accent).id])
    texts = list(words)
    for _ in range(n_phrases):
        a, b = rng.choice(len(words), 2, replace=False)
        texts.append(f"{words[a]} {words[b]}")
    examples, _ = build_g2p_corpus(
        texts, corpus.lexicons[accent], corpus.accent_id(accent), corpus.inventory, corpus.graphemes, len_bounds=(1, 200)
    )
    return examples


# ----------------------------------------------------------------------------- reports


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_loss_csv(path: Path, history: List[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(history[0]) if history else ["epoch"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for rec in history:
            w.writerow(rec)


def _partition(store) -> dict:
    return {"trainable": list(store.trainable_groups), "frozen": list(store.frozen_groups)}


def _require(path: Path, what: str) -> Path:
    if not (path / "meta").exists():
        raise ConfigError(f"{what} checkpoint not found at {path}; run the earlier stage first")
    return path


# ----------------------------------------------------------------------------- G2P stages


def run_lexicon_stats(cfg: RunConfig, corpus: Corpus) -> dict:
    target = corpus.lexicons[corpus.spec.target]
    rows = {}
    for name in corpus.spec.source_accents:
        rows[name] = asdict(compare_lexicons(corpus.lexicons[name], target, corpus.inventory))
    report = {"target": corpus.spec.target, "versus": rows}
    _write_json(cfg.out / "reports" / "lexicon_stats.json", report)
    return report


def _phoneme_error(g2p, examples: Sequence[G2PExample]) -> Dict[str, float]:
    """Corpus-level PER/WER: summed edit distance over summed reference length."""
    if not examples:
        return {"per": float("nan"), "wer": float("nan"), "n": 0}
    decoded = g2p_decode_batch(g2p, [ex.graphemes for ex in examples], [ex.accent for ex in examples])
    ph_err = ph_len = w_err = w_len = 0
    for ex, res in zip(examples, decoded):
        ref = ex.phonemes[1:-1]
        ph_err += metrics.edit_distance(ref, res.phonemes)
        ph_len += len(ref)
        ref_w = metrics._word_groups(ref, 3, (0, 1, 2))
        w_err += metrics.edit_distance(ref_w, metrics._word_groups(res.phonemes, 3, (0, 1, 2)))
        w_len += len(ref_w)
    return {"per": ph_err / ph_len, "wer": w_err / w_len, "n": len(examples)}


def run_pretrain_g2p(cfg: RunConfig, corpus: Corpus) -> dict:
    split = word_split(corpus, cfg)
    train = []
    for name in corpus.spec.source_accents:
        train += g2p_examples(corpus, name, split.pretrain, cfg.data.g2p_phrases, cfg.seed)
    g2p_cfg = G2PConfig(grapheme_vocab=len(corpus.graphemes), accent_table_size=len(corpus.spec.accents), **cfg.g2p_model)
    model = init_g2p(g2p_cfg, cfg.seed)
    model, history = train_g2p(model, train, "pretrain", cfg.g2p_pretrain)
    out = cfg.stage_dir("g2p_pretrain")
    save_checkpoint(model, out, history, {"examples": len(train)})
    _write_loss_csv(cfg.out / "reports" / "g2p_pretrain_loss.csv", history)
    report = {"stage": "pretrain-g2p", "examples": len(train), "partition": _partition(model), "final": history[-1]}
    _write_json(cfg.out / "reports" / "pretrain-g2p.json", report)
    return report


def run_finetune_g2p(cfg: RunConfig, corpus: Corpus) -> dict:
    src = _require(cfg.stage_dir("g2p_pretrain"), "pretrained G2P")
    split = word_split(corpus, cfg)
    model, _ = load_checkpoint(src, "g2p")
    train = g2p_examples(corpus, corpus.spec.target, split.finetune, len(split.finetune), cfg.seed)
    model, history = train_g2p(model, train, "finetune", cfg.g2p_finetune)
    save_checkpoint(model, cfg.stage_dir("g2p_finetune"), history, {"examples": len(train)})
    _write_loss_csv(cfg.out / "reports" / "g2p_finetune_loss.csv", history)
    report = {"stage": "finetune-g2p", "examples": len(train), "partition": _partition(model), "final": history[-1]}
    _write_json(cfg.out / "reports" / "finetune-g2p.json", report)
    return report


def run_eval_g2p(cfg: RunConfig, corpus: Corpus) -> dict:
    split = word_split(corpus, cfg)
    target = corpus.spec.target
    sets = {
        "finetune_words": g2p_examples(corpus, target, split.finetune, 0, cfg.seed),
        "heldout_words": g2p_examples(corpus, target, split.heldout, 0, cfg.seed),
    }
    report = {"stage": "eval-g2p", "accent": target}
    for system, stage_dir in (("pretrained", "g2p_pretrain"), ("finetuned", "g2p_finetune")):
        model, _ = load_checkpoint(_require(cfg.stage_dir(stage_dir), f"{system} G2P"), "g2p")
        report[system] = {name: _phoneme_error(model, ex) for name, ex in sets.items()}
    _write_json(cfg.out / "reports" / "eval-g2p.json", report)
    return report


# ----------------------------------------------------------------------------- acoustic features


def utterance_phonemes(corpus: Corpus, utt: dict) -> List[int]:
    """Ground-truth phoneme indices (with WB, without BOS/EOS)."""
    return phonemes_for_words(utt["text"].split(), corpus.lexicons[utt["accent"]], corpus.inventory)[1:-1]


def analyse_utterance(corpus: Corpus, utt: dict) -> dict:
    wave = read_wav(corpus.root / utt["wav"])
    segs = read_alignment(corpus.root / utt["alignment"], corpus.inventory)
    mel = mel_spectrogram(wave)
    f0 = estimate_f0(wave)
    stop = np.zeros(len(mel))
    stop[-1] = 1.0
    return {
        "mel": mel,
        "f0_raw": phoneme_average_f0(interpolate_unvoiced(f0), segs),
        "logdur": durations_from_alignment(segs),
        "stop": stop,
        "segments": segs,
    }


def build_features(
    cfg: RunConfig, corpus: Corpus, g2p, utts: Sequence[dict], name: str, f0_stats: Optional[Tuple[float, float]] = None
) -> Tuple[List[AcousticItem], Tuple[float, float]]:
    """Bottlenecks from the G2P decoder plus analysed targets; arrays and a
    manifest go to `features/<name>`. F0 statistics are fitted when not given."""
    raw = []
    for utt in utts:
        a = analyse_utterance(corpus, utt)
        phonemes = utterance_phonemes(corpus, utt)
        g = corpus.graphemes.encode(utt["text"])
        a["bottleneck"] = extract_bottleneck(g2p, g, utt["accent_id"], phonemes)
        if len(a["bottleneck"]) != len(a["segments"]):
            raise ConfigError(f"{utt['utt_id']}: {len(a['bottleneck'])} bottleneck rows vs {len(a['segments'])} segments")
        a["speaker"] = read_array(corpus.root / utt["speaker_path"], squeeze=True)
        raw.append(a)
    normed, stats = f0_stats_and_normalize([a["f0_raw"] for a in raw], f0_stats)
    root = cfg.out / "features" / name
    items, manifest = [], []
    for utt, a, f0 in zip(utts, raw, normed):
        uid = utt["utt_id"]
        paths = {k: root / f"{uid}.{k}.f32" for k in ("bottleneck", "speaker", "mel", "f0", "dur", "stop")}
        write_array(paths["bottleneck"], a["bottleneck"])
        write_array(paths["speaker"], a["speaker"])
        write_array(paths["mel"], a["mel"])
        write_array(paths["f0"], f0)
        write_array(paths["dur"], a["logdur"])
        write_array(paths["stop"], a["stop"])
        manifest.append({"utt_id": uid, **{f"{k}_path": str(p.relative_to(cfg.out)) for k, p in paths.items()}})
        items.append(AcousticItem(uid, a["bottleneck"], a["speaker"], a["mel"], a["stop"], f0, a["logdur"]))
    write_jsonl(root / "manifest.jsonl", manifest)
    return items, stats


def read_features(manifest_path, base: Path) -> List[AcousticItem]:
    items = []
    for rec in read_jsonl(manifest_path):
        arr = {k: read_array(base / rec[f"{k}_path"]) for k in ("bottleneck", "speaker", "mel", "f0", "dur", "stop")}
        items.append(
            AcousticItem(
                rec["utt_id"],
                arr["bottleneck"].astype(np.float64),
                arr["speaker"][0].astype(np.float64),
                arr["mel"].astype(np.float64),
                arr["stop"][0].astype(np.float64),
                arr["f0"][0].astype(np.float64),
                arr["dur"][0].astype(np.float64),
            )
        )
    return items


# ----------------------------------------------------------------------------- acoustic stages


def _final_g2p(cfg: RunConfig):
    model, _ = load_checkpoint(_require(cfg.stage_dir("g2p_finetune"), "fine-tuned G2P"), "g2p")
    return model


def run_pretrain_tts(cfg: RunConfig, corpus: Corpus) -> dict:
    g2p = _final_g2p(cfg)
    utts = utterance_split(corpus, cfg)["pretrain"]
    items, stats = build_features(cfg, corpus, g2p, utts, "pretrain")
    model = init_acoustic(cfg.acoustic_config(g2p.config.model_dim), cfg.seed)
    model, history = train_acoustic(model, items, "pretrain", cfg.tts_pretrain)
    save_checkpoint(model, cfg.stage_dir("tts_pretrain"), history, {"f0_stats": list(stats)})
    _write_loss_csv(cfg.out / "reports" / "tts_pretrain_loss.csv", history)
    report = {"stage": "pretrain-tts", "utterances": len(items), "partition": _partition(model), "first": history[0], "final": history[-1]}
    _write_json(cfg.out / "reports" / "pretrain-tts.json", report)
    return report


def run_finetune_tts(cfg: RunConfig, corpus: Corpus) -> dict:
    src = _require(cfg.stage_dir("tts_pretrain"), "pretrained acoustic")
    g2p = _final_g2p(cfg)
    model, meta = load_checkpoint(src, "acoustic")
    stats = tuple(meta["extra"]["f0_stats"])
    utts = utterance_split(corpus, cfg)["finetune"]
    items, _ = build_features(cfg, corpus, g2p, utts, "finetune", stats)
    model, history = train_acoustic(model, items, "finetune", cfg.tts_finetune)
    save_checkpoint(model, cfg.stage_dir("tts_finetune"), history, {"f0_stats": list(stats)})
    _write_loss_csv(cfg.out / "reports" / "tts_finetune_loss.csv", history)
    report = {"stage": "finetune-tts", "utterances": len(items), "partition": _partition(model), "first": history[0], "final": history[-1]}
    _write_json(cfg.out / "reports" / "finetune-tts.json", report)
    return report


def run_synthesize(cfg: RunConfig, corpus: Corpus) -> dict:
    g2p = _final_g2p(cfg)
    target = corpus.accent_id(corpus.spec.target)
    tests = utterance_split(corpus, cfg)["test"]
    report = {"stage": "synthesize", "accent": target.name, "utterances": {}}
    for system, stage_dir in zip(SYSTEMS, ("tts_pretrain", "tts_finetune")):
        model, _ = load_checkpoint(_require(cfg.stage_dir(stage_dir), f"{system} acoustic"), "acoustic")
        out = cfg.out / "synth" / system
        out.mkdir(parents=True, exist_ok=True)
        for utt in tests:
            speaker = read_array(corpus.root / utt["speaker_path"], squeeze=True)
            res = synthesize(g2p, model, utt["text"], target, speaker, corpus.graphemes)
            write_array(out / f"{utt['utt_id']}.mel.f32", res.mel)
            write_array(out / f"{utt['utt_id']}.dur.f32", res.durations().astype(np.float64))
            write_wav(out / f"{utt['utt_id']}.wav", invert_mel(res.mel, cfg.griffin_lim_iters, seed=cfg.seed))
            report["utterances"].setdefault(utt["utt_id"], {})[system] = {
                "frames": int(len(res.mel)),
                "phonemes": corpus.inventory.decode(res.phonemes),
                "truncated": bool(res.truncated),
            }
    _write_json(cfg.out / "reports" / "synthesize.json", report)
    return report


# ----------------------------------------------------------------------------- evaluation


def phoneme_templates(corpus: Corpus, utts: Sequence[dict]) -> np.ndarray:
    """Mean log-mel frame per phoneme index, estimated from reference audio."""
    n = len(corpus.inventory)
    sums = np.zeros((n, 80))
    counts = np.zeros(n)
    for utt in utts:
        a = analyse_utterance(corpus, utt)
        for s in a["segments"]:
            sums[s.phoneme] += a["mel"][s.start : s.end].sum(axis=0)
            counts[s.phoneme] += s.end - s.start
    seen = counts > 0
    return sums[seen] / counts[seen, None]


def posteriorgram(mel: np.ndarray, templates: np.ndarray, temperature: float = 80.0) -> np.ndarray:
    """Softmax over negative squared distances to phoneme templates (toy recognizer)."""
    d = ((mel[:, None, :] - templates[None]) ** 2).sum(-1) / temperature
    z = -d - (-d).max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _safe(fn, *args, **kw) -> float:
    try:
        return float(fn(*args, **kw))
    except metrics.MetricError:
        return float("nan")


def evaluate_pair(
    ref_wave: np.ndarray,
    gen_wave: np.ndarray,
    ref_dur: Optional[np.ndarray] = None,
    gen_dur: Optional[np.ndarray] = None,
    templates: Optional[np.ndarray] = None,
) -> Dict[str, float]:
    """Objective metrics of generated against reference audio after DTW on log-mel.

    Generated audio shorter than one analysis window scores NaN on every metric.
    """
    if len(gen_wave) < WIN:
        logger.warning("generated audio has %d samples, too short to analyse", len(gen_wave))
        return {c: float("nan") for c in EVAL_COLUMNS}
    ref_mel, gen_mel = mel_spectrogram(ref_wave), mel_spectrogram(gen_wave)
    path, _ = metrics.dtw_align(ref_mel, gen_mel)
    rf, gf = estimate_f0(ref_wave), estimate_f0(gen_wave)
    out = {
        "f0_rmse_hz": _safe(metrics.f0_rmse, rf.values, gf.values, path, rf.voiced, gf.voiced),
        "logf0_corr": _safe(metrics.logf0_correlation, rf.values, gf.values, path, rf.voiced, gf.voiced),
        "uv_error_pct": 100.0 * metrics.uv_error_rate(rf.voiced, gf.voiced, path),
        "disturbance_frames": metrics.frame_disturbance(path),
        "dur_rmse_ms": float("nan"),
        "kld": float("nan"),
    }
    if ref_dur is not None and gen_dur is not None and len(ref_dur) == len(gen_dur):
        out["dur_rmse_ms"] = metrics.duration_rmse_ms(ref_dur, gen_dur)
    if templates is not None:
        idx = np.asarray(path)
        out["kld"] = metrics.kld_posteriorgram(
            posteriorgram(ref_mel, templates)[idx[:, 0]], posteriorgram(gen_mel, templates)[idx[:, 1]]
        )
    return out


def f0_contour_rows(series: Dict[str, np.ndarray]) -> List[dict]:
    rows = []
    for name, wave in series.items():
        f0 = estimate_f0(wave)
        for k, (v, voiced) in enumerate(zip(f0.values, f0.voiced)):
            rows.append({"series": name, "frame": k, "time_s": round(k * 0.0125, 4), "f0_hz": round(float(v), 4), "voiced": int(voiced)})
    return rows


def run_evaluate(cfg: RunConfig, corpus: Corpus) -> dict:
    split = utterance_split(corpus, cfg)
    tests = split["test"]
    for system in SYSTEMS:
        if not (cfg.out / "synth" / system).exists():
            raise ConfigError(f"no synthesized audio for {system}; run synthesize first")
    templates = phoneme_templates(corpus, split["pretrain"] + split["finetune"])
    records = []
    contour_series = {}
    for utt in tests:
        ref = read_wav(corpus.root / utt["wav"])
        ref_dur = np.round(np.exp(analyse_utterance(corpus, utt)["logdur"]))
        if not contour_series:
            contour_series["reference"] = ref
        for system in SYSTEMS:
            base = cfg.out / "synth" / system / utt["utt_id"]
            gen = read_wav(base.with_suffix(".wav"))
            gen_dur = read_array(base.with_suffix(".dur.f32"), squeeze=True)
            if utt is tests[0]:
                contour_series[system] = gen
            for metric, value in evaluate_pair(ref, gen, ref_dur, np.atleast_1d(gen_dur), templates).items():
                records.append({"utt_id": utt["utt_id"], "system": system, "metric": metric, "value": value})
    write_jsonl(cfg.out / "reports" / "metrics.jsonl", records)
    table = []
    for system in SYSTEMS:
        rows = [r for r in records if r["system"] == system and not np.isnan(r["value"])]
        agg = metrics.aggregate(rows)
        table.append({"system": system, **{c: agg.get(c, float("nan")) for c in EVAL_COLUMNS}})
    improved = {}
    for metric in ("f0_rmse_hz", "disturbance_frames"):
        by = {(r["utt_id"], r["system"]): r["value"] for r in records if r["metric"] == metric}
        wins = [by[(u["utt_id"], "finetuned")] < by[(u["utt_id"], "pretrained")] for u in tests]
        improved[metric] = sum(wins) / len(wins)
    with open(cfg.out / "reports" / "table.tsv", "w", encoding="utf-8") as fh:
        fh.write("system\t" + "\t".join(EVAL_COLUMNS) + "\n")
        for row in table:
            fh.write(row["system"] + "\t" + "\t".join(f"{row[c]:.4f}" for c in EVAL_COLUMNS) + "\n")
    rows = f0_contour_rows(contour_series)
    with open(cfg.out / "reports" / "f0_contours.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    report = {"stage": "evaluate", "accent": corpus.spec.target, "utterances": [u["utt_id"] for u in tests], "table": table, "improved_fraction": improved}
    _write_json(cfg.out / "reports" / "evaluate.json", report)
    return report


RUNNERS = {
    "lexicon-stats": run_lexicon_stats,
    "pretrain-g2p": run_pretrain_g2p,
    "finetune-g2p": run_finetune_g2p,
    "eval-g2p": run_eval_g2p,
    "pretrain-tts": run_pretrain_tts,
    "finetune-tts": run_finetune_tts,
    "synthesize": run_synthesize,
    "evaluate": run_evaluate,
}


def run_pipeline(cfg: RunConfig, stage: str) -> dict:
    """Run one stage, or `all` for every stage in order."""
    if stage != "all" and stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES + ('all',)}")
    torch.set_num_threads(1)  # bitwise-repeatable reductions
    corpus = load_corpus(cfg.corpus)
    # fail on bad splits before any training starts
    word_split(corpus, cfg)
    utterance_split(corpus, cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "run_config.json", cfg.to_dict())
    if stage == "all":
        return {s: RUNNERS[s](cfg, corpus) for s in STAGES}
    return RUNNERS[stage](cfg, corpus)
