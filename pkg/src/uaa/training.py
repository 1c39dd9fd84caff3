"""Classifier training loops: standard stage-2 training (optionally with the
frozen augmenter and classic policies) and the PGD-AT baseline.

Composition order is fixed for reproducibility: classic policy transforms
run first, the frozen augmenter last, so the perturbation lands on the
pixels the model actually sees. The augmenter's parameters are never part
of the optimizer and receive no gradients.

Both loops attach their per-epoch metrics records (epoch, mean loss,
learning rate, wall time) to the returned model as ``model.train_log``.
"""

from __future__ import annotations

import time
from typing import Optional

import torch
import torch.nn.functional as F

from .attacks import AttackConfig, pgd
from .augment import AugmentationPolicy, apply_policy
from .augmenter import GeneratorCheckpoint, uaa_augment
from .data import DatasetSplit, make_soft_labels
from .models import NonFiniteLossError, build_classifier, soft_cross_entropy
from .optim import OptimizerSpec, make_optimizer, make_scheduler
from .utils import MetricsLogger, derive_seed

__all__ = ["stage2_train", "pgd_at_train", "mean_epoch_wall_time"]


def _train_loop(arch: str, data: DatasetSplit, epochs: int,
                optimizer_spec: OptimizerSpec, seed: int, batch_size: int,
                make_batch, loss_fn, log_path: Optional[str], tag: str):
    if len(data) == 0:
        raise ValueError("empty data stream")
    model = build_classifier(arch, data.num_classes, derive_seed(seed, "init"),
                             data.image_shape)
    optimizer = make_optimizer(model.parameters(), optimizer_spec)
    scheduler = make_scheduler(optimizer, optimizer_spec, epochs)
    metrics = MetricsLogger(log_path, tag=tag)

    for epoch in range(epochs):
        t0 = time.perf_counter()
        losses = []
        for i, batch in enumerate(data.batches(
                batch_size, shuffle_seed=derive_seed(seed, "order", epoch))):
            batch = make_batch(model, batch, epoch, i)
            model.train()
            loss = loss_fn(model(batch.pixels), batch.labels)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"{tag} loss non-finite at epoch {epoch}, batch {i}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        scheduler.step()
        metrics.log(epoch=epoch, mean_loss=sum(losses) / len(losses),
                    lr=optimizer.param_groups[0]["lr"],
                    wall_time=time.perf_counter() - t0)

    model.eval()
    model.train_log = metrics.records
    return model


def stage2_train(arch: str, data: DatasetSplit,
                 policy: AugmentationPolicy = AugmentationPolicy(),
                 ckpt: Optional[GeneratorCheckpoint] = None,
                 soft_labels: bool = False, epochs: int = 15,
                 optimizer_spec: Optional[OptimizerSpec] = None,
                 seed: int = 0, batch_size: int = 128,
                 smoothing: float = 0.1,
                 log_path: Optional[str] = None) -> torch.nn.Module:
    """Train a classifier on augmented batches; deterministic under seed.

    When ``ckpt`` is given the frozen augmenter runs after the policy's
    transforms. ``soft_labels`` switches the loss to label-smoothed
    cross-entropy with the given smoothing factor.
    """
    optimizer_spec = optimizer_spec or OptimizerSpec()
    num_classes = data.num_classes

    def make_batch(model, batch, epoch, i):
        batch = apply_policy(batch, policy, seed=derive_seed(seed, "policy", epoch, i))
        if ckpt is not None:
            batch = uaa_augment(batch, ckpt)
        return batch

    if soft_labels:
        def loss_fn(logits, labels):
            probs = make_soft_labels(labels, num_classes, smoothing).probs
            return soft_cross_entropy(logits, probs.to(logits.dtype))
    else:
        def loss_fn(logits, labels):
            return F.cross_entropy(logits, labels)

    return _train_loop(arch, data, epochs, optimizer_spec, seed, batch_size,
                       make_batch, loss_fn, log_path, tag="stage2")


def pgd_at_train(arch: str, data: DatasetSplit, attack: AttackConfig,
                 epochs: int = 15, optimizer_spec: Optional[OptimizerSpec] = None,
                 seed: int = 0, batch_size: int = 128,
                 log_path: Optional[str] = None) -> torch.nn.Module:
    """Adversarial training: every batch is replaced by PGD-k examples
    before the loss step (the inner maximization of min-max training)."""
    if attack.family != "pgd":
        raise ValueError("pgd_at_train expects a pgd attack config")
    optimizer_spec = optimizer_spec or OptimizerSpec()

    def make_batch(model, batch, epoch, i):
        model.eval()
        return pgd(model, batch, attack.reseeded(epoch, i))

    def loss_fn(logits, labels):
        return F.cross_entropy(logits, labels)

    return _train_loop(arch, data, epochs, optimizer_spec, seed, batch_size,
                       make_batch, loss_fn, log_path, tag="pgd_at")


def mean_epoch_wall_time(model: torch.nn.Module) -> float:
    """Average per-epoch wall time from a trained model's metrics records."""
    records = getattr(model, "train_log", None)
    if not records:
        raise ValueError("model carries no training records")
    times = [r["wall_time"] for r in records]
    return sum(times) / len(times)
