"""Grouped parameter stores with per-group freeze flags."""

from __future__ import annotations

import math
from typing import Dict, Iterable, List, Tuple

import numpy as np
import torch
from torch import nn

STAGES = ("pretrain", "finetune")


class ParameterStore(nn.Module):
    """A module whose direct children are the named parameter groups.

    Subclasses set `GROUPS` and create one child module per name. Freezing a
    group turns off its gradients and keeps its normalization statistics fixed.
    """

    GROUPS: Tuple[str, ...] = ()

    def __init__(self):
        super().__init__()
        self._frozen: set = set()

    @property
    def group_names(self) -> Tuple[str, ...]:
        return self.GROUPS

    def group(self, name: str) -> nn.Module:
        if name not in self.GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def group_state(self, name: str) -> Dict[str, torch.Tensor]:
        """Parameters and persistent buffers of one group, in a fixed order."""
        return {k: v for k, v in self.group(name).state_dict().items()}

    def group_arrays(self, name: str) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.group_state(name).items()}

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
        self._frozen = set(self.GROUPS) - names
        for g in self.GROUPS:
            for p in self.group(g).parameters():
                p.requires_grad_(g in names)
        self.train(self.training)

    @property
    def trainable_groups(self) -> List[str]:
        return [g for g in self.GROUPS if g not in self._frozen]

    @property
    def frozen_groups(self) -> List[str]:
        return [g for g in self.GROUPS if g in self._frozen]

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for g in self.trainable_groups for p in self.group(g).parameters()]

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen groups never update running statistics or apply dropout
        for g in getattr(self, "_frozen", ()):
            self.group(g).eval()
        return self

    def fingerprint(self) -> Dict[str, bytes]:
        """Raw bytes of every group, for bitwise before/after comparisons."""
        out = {}
        for g in self.GROUPS:
            chunks = [v.detach().cpu().contiguous().numpy().tobytes() for v in self.group_state(g).values()]
            out[g] = b"".join(chunks)
        return out


def mask_for_stage(stage: str, all_groups: Iterable[str], finetune: Iterable[str]) -> set:
    if stage == "pretrain":
        return set(all_groups)
    if stage == "finetune":
        return set(finetune)
    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


def _fan_in(name: str, shape: torch.Size, module: nn.Module) -> int:
    if isinstance(module, nn.Embedding):
        return 1
    return int(np.prod(shape[1:]))


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight matrices,
    zeros for biases, ones for normalization scales."""
    gen = torch.Generator().manual_seed(int(seed))
    for mod_name, module in model.named_modules():
        for name, p in module.named_parameters(recurse=False):
            if isinstance(module, (nn.LayerNorm, nn.BatchNorm1d)):
                p.fill_(1.0 if name == "weight" else 0.0)
            elif p.dim() < 2 or name.startswith("bias"):
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(_fan_in(name, p.shape, module))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        if isinstance(module, nn.BatchNorm1d):
            module.reset_running_stats()
