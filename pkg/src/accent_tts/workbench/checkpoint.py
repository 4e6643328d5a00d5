"""Checkpoint directories: a JSON `meta` file plus one raw array file per group."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from ..acoustic import AcousticConfig, AcousticModel
from ..g2p import G2PConfig, G2PModel
from ..params import ParameterStore

FORMAT_VERSION = 1
KINDS = {"g2p": (G2PModel, G2PConfig), "acoustic": (AcousticModel, AcousticConfig)}


class CheckpointError(ValueError):
    pass


def _kind_of(store: ParameterStore) -> str:
    for kind, (cls, _) in KINDS.items():
        if isinstance(store, cls):
            return kind
    raise CheckpointError(f"unsupported store type {type(store).__name__}")


def save_checkpoint(store: ParameterStore, path, history=None, extra: Optional[dict] = None) -> Path:
    """Write every group's tensors (parameters and buffers) as little-endian raw bytes."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    groups = {}
    for g in store.group_names:
        tensors = []
        with open(out / f"{g}.bin", "wb") as fh:
            for name, t in store.group_state(g).items():
                a = t.detach().cpu().contiguous().numpy()
                a = a.astype(a.dtype.newbyteorder("<"), copy=False)
                fh.write(a.tobytes())
                tensors.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str})
        groups[g] = tensors
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_of(store),
        "config": store.config.to_dict(),
        "groups": groups,
        "trainable": store.trainable_groups,
        "frozen": store.frozen_groups,
        "history": history or [],
        "extra": extra or {},
    }
    (out / "meta").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return out


def read_meta(path) -> dict:
    p = Path(path) / "meta"
    if not p.exists():
        raise CheckpointError(f"{path}: no meta file")
    meta = json.loads(p.read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
    return meta


def _config_from(kind: str, d: dict):
    cfg_cls = KINDS[kind][1]
    return cfg_cls(**d)


def load_checkpoint(path, kind: Optional[str] = None) -> Tuple[ParameterStore, dict]:
    """Rebuild the store described by `meta` and fill it bit-exactly.

    All groups come back trainable; callers apply their stage mask afterwards.
    """
    meta = read_meta(path)
    if meta.get("kind") not in KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    if kind is not None and meta["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta['kind']}")
    cls = KINDS[meta["kind"]][0]
    store = cls(_config_from(meta["kind"], meta["config"]))
    state = {}
    for g in store.group_names:
        if g not in meta["groups"]:
            raise CheckpointError(f"{path}: group {g} missing from meta")
        expected = store.group_state(g)
        listed = meta["groups"][g]
        if [t["name"] for t in listed] != list(expected):
            raise CheckpointError(f"{path}: group {g} tensor names do not match the model")
        raw = (Path(path) / f"{g}.bin").read_bytes()
        need = sum(int(np.prod(t["shape"])) * np.dtype(t["dtype"]).itemsize for t in listed)
        if len(raw) != need:
            raise CheckpointError(f"{path}: group {g} has {len(raw)} bytes, meta implies {need}")
        offset = 0
        for t in listed:
            dt = np.dtype(t["dtype"])
            n = int(np.prod(t["shape"]))
            a = np.frombuffer(raw, dtype=dt, count=n, offset=offset).reshape(t["shape"])
            offset += n * dt.itemsize
            ref = expected[t["name"]]
            if tuple(a.shape) != tuple(ref.shape):
                raise CheckpointError(f"{path}: group {g} tensor {t['name']} has shape {a.shape}, model expects {tuple(ref.shape)}")
            state[f"{g}.{t['name']}"] = torch.from_numpy(a.astype(dt.newbyteorder("="), copy=True))
    # float checkpoints restore the dtype they were written in
    dtypes = {v.dtype for k, v in state.items() if v.is_floating_point()}
    if dtypes == {torch.float64}:
        store.double()
    store.load_state_dict(state)
    store.set_trainable(store.group_names)
    store.eval()
    return store, meta
