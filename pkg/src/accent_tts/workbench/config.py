"""Flat `key = value` run configuration with `include` support.

Lines look like `tts.pretrain.lr = 1e-3`; `#` starts a comment and
`include other.cfg` pulls in another file (relative to the including file),
whose keys can then be overridden by later lines.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from ..acoustic import AcousticConfig, AcousticHyper
from ..g2p import G2PHyper


class ConfigError(ValueError):
    pass


def _parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return [_parse_value(t) for t in text.split(",")]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_file(path, _seen: Optional[set] = None) -> Dict[str, Any]:
    path = Path(path).resolve()
    seen = _seen if _seen is not None else set()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    seen.add(path)
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            values.update(parse_config_file(path.parent / line[len("include ") :].strip(), seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = _parse_value(value)
    seen.discard(path)
    return values


def parse_overrides(items: List[str]) -> Dict[str, Any]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


@dataclass
class DataSplit:
    """How the toy corpus is carved up between stages."""

    pretrain_words: int = 200
    finetune_words: int = 50
    heldout_words: int = 30
    pretrain_utts: int = 0  # per source accent; 0 means all
    finetune_utts: int = 20
    test_utts: int = 10
    g2p_phrases: int = 200  # two-word phrases per source accent so WB is learned


@dataclass
class RunConfig:
    seed: int
    corpus: Path
    out: Path
    g2p_model: Dict[str, Any] = field(default_factory=dict)
    tts_model: Dict[str, Any] = field(default_factory=dict)
    g2p_pretrain: G2PHyper = field(default_factory=lambda: G2PHyper(lr=5e-4, batch=128, epochs=100))
    g2p_finetune: G2PHyper = field(default_factory=lambda: G2PHyper(lr=5e-4, batch=128, epochs=50))
    tts_pretrain: AcousticHyper = field(default_factory=lambda: AcousticHyper.for_stage("pretrain"))
    tts_finetune: AcousticHyper = field(default_factory=lambda: AcousticHyper.for_stage("finetune"))
    data: DataSplit = field(default_factory=DataSplit)
    griffin_lim_iters: int = 32
    toy: Dict[str, Any] = field(default_factory=dict)

    def acoustic_config(self, bottleneck_dim: int) -> AcousticConfig:
        return AcousticConfig(**{"bottleneck_dim": bottleneck_dim, **self.tts_model})

    def stage_dir(self, name: str) -> Path:
        return self.out / name

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["corpus"], d["out"] = str(self.corpus), str(self.out)
        return d


_HYPER_KEYS = {
    "g2p.pretrain": ("g2p_pretrain", G2PHyper),
    "g2p.finetune": ("g2p_finetune", G2PHyper),
    "tts.pretrain": ("tts_pretrain", AcousticHyper),
    "tts.finetune": ("tts_finetune", AcousticHyper),
}


def build_run_config(values: Dict[str, Any], require_corpus: bool = True) -> RunConfig:
    """Typed config from flat keys; unknown keys and missing seed are errors."""
    values = dict(values)
    if values.get("seed") is None:
        raise ConfigError("seed is mandatory")
    if values.get("out") is None:
        raise ConfigError("out (output directory) is mandatory")
    cfg = RunConfig(seed=int(values.pop("seed")), corpus=Path(str(values.pop("corpus", "") or "")), out=Path(str(values.pop("out"))))
    for h in ("g2p_pretrain", "g2p_finetune", "tts_pretrain", "tts_finetune"):
        getattr(cfg, h).seed = cfg.seed
    g2p_fields = {f.name for f in dataclasses.fields(G2PHyper)}
    tts_fields = {f.name for f in dataclasses.fields(AcousticHyper)}
    acoustic_fields = {f.name for f in dataclasses.fields(AcousticConfig)}
    split_fields = {f.name for f in dataclasses.fields(DataSplit)}
    for key, value in values.items():
        prefix, _, name = key.rpartition(".")
        if prefix in _HYPER_KEYS:
            attr, cls = _HYPER_KEYS[prefix]
            allowed = g2p_fields if cls is G2PHyper else tts_fields
            if name not in allowed:
                raise ConfigError(f"unknown hyperparameter {key!r}")
            if name == "weights":
                value = tuple(float(v) for v in value)
                if len(value) != 4:
                    raise ConfigError("tts weights need four values (alpha, beta, gamma, delta)")
            setattr(getattr(cfg, attr), name, value)
        elif prefix == "g2p.model":
            cfg.g2p_model[name] = value
        elif prefix == "tts.model":
            if name not in acoustic_fields:
                raise ConfigError(f"unknown acoustic model field {key!r}")
            cfg.tts_model[name] = tuple(value) if isinstance(value, list) else value
        elif prefix == "data":
            if name not in split_fields:
                raise ConfigError(f"unknown data field {key!r}")
            setattr(cfg.data, name, int(value))
        elif prefix == "toy":
            cfg.toy[name] = value
        elif key == "griffin_lim_iters":
            cfg.griffin_lim_iters = int(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if require_corpus and not (cfg.corpus / "toy_spec.json").exists():
        raise ConfigError(f"corpus directory {str(cfg.corpus)!r} does not contain a toy corpus")
    for h in (cfg.g2p_pretrain, cfg.g2p_finetune, cfg.tts_pretrain, cfg.tts_finetune):
        if h.epochs < 1 or h.batch < 1 or h.lr <= 0:
            raise ConfigError("epochs, batch and lr must be positive")
    return cfg
