"""Optimizer and learning-rate schedule plumbing shared by both stages.

Defaults mirror the published training recipe: Adam with lr 1e-3, betas
(0.9, 0.999), weight decay 5e-4, and a step decay of x0.1 at half and
three-quarters of the epoch budget (the 50/75-of-100 schedule, rescaled).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

__all__ = ["OptimizerSpec", "default_milestones", "make_optimizer", "make_scheduler"]


def default_milestones(epochs: int) -> list[int]:
    """Decay points at floor(0.5E) and floor(0.75E), deduplicated and valid."""
    points = sorted({epochs // 2, (3 * epochs) // 4})
    return [p for p in points if 0 < p < epochs]


@dataclass
class OptimizerSpec:
    name: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    milestones: Optional[Sequence[int]] = None  # None -> scaled defaults

    def resolved_milestones(self, epochs: int) -> list[int]:
        if self.milestones is None:
            return default_milestones(epochs)
        ms = [int(m) for m in self.milestones]
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if any(not 0 < m < epochs for m in ms):
            raise ValueError(f"milestones must lie strictly inside (0, {epochs})")
        return ms

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "lr": self.lr,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "lr_decay": self.lr_decay,
            "milestones": None if self.milestones is None else list(self.milestones),
        }

    @staticmethod
    def from_config(cfg: dict) -> "OptimizerSpec":
        cfg = dict(cfg)
        if "betas" in cfg:
            cfg["betas"] = tuple(cfg["betas"])
        return OptimizerSpec(**cfg)


def make_optimizer(params, spec: OptimizerSpec) -> torch.optim.Optimizer:
    if spec.name == "adam":
        return torch.optim.Adam(params, lr=spec.lr, betas=spec.betas,
                                weight_decay=spec.weight_decay)
    if spec.name == "sgd":
        return torch.optim.SGD(params, lr=spec.lr, momentum=0.9,
                               weight_decay=spec.weight_decay)
    raise ValueError(f"unknown optimizer {spec.name!r}")


def make_scheduler(optimizer, spec: OptimizerSpec, epochs: int):
    return torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=spec.resolved_milestones(epochs), gamma=spec.lr_decay)
