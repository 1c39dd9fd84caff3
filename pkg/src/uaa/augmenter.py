"""Universal adversarial augmenter: offline generator training and the
frozen plug-and-play augmentation it yields.

Stage 1 trains a perturbation generator against a stream of proxy
classifiers. At the start of every epoch the proxy is randomly
re-initialized and frozen for that whole epoch, so the generator cannot
memorize any single set of classifier weights and has to learn data-centric
perturbation patterns instead. The generator maximizes the proxy's
label-smoothed cross-entropy on the composed adversarial images, i.e. it
minimizes the negated loss.

Stage 2 treats the trained generator as a deterministic image transform:

    delta = clip(G(x), -eps, +eps)
    x_out = clip(x + delta, 0, 1)

which guarantees max |x_out - x| <= eps and keeps pixels valid.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from .data import DatasetSplit, ImageBatch, make_soft_labels
from .models import (CHECKPOINT_FORMAT_VERSION, NonFiniteLossError,
                     build_classifier, build_generator, freeze, is_frozen,
                     soft_cross_entropy)
from .optim import OptimizerSpec, make_optimizer, make_scheduler
from .utils import MetricsLogger, derive_seed, param_checksum

__all__ = [
    "PerturbationBudget",
    "UaaTrainConfig",
    "GeneratorCheckpoint",
    "bound_perturbation",
    "compose_adversarial",
    "uaa_stage1_train",
    "uaa_augment",
    "save_generator_checkpoint",
    "load_generator_checkpoint",
]

# hard abort threshold for the unbounded maximization objective
LOSS_ABORT_THRESHOLD = 1e4


@dataclass(frozen=True)
class PerturbationBudget:
    """L-inf radius in pixel-intensity units; must satisfy 0 < eps < 1."""

    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")


def bound_perturbation(raw: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip a raw perturbation map elementwise to [-eps, +eps].

    Elements already inside the budget pass through unchanged; eps may be 0,
    which zeroes the perturbation entirely.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    return raw.clamp(-epsilon, epsilon)


def compose_adversarial(pixels: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """clip(x + delta, 0, 1); delta may be single-channel and broadcasts.

    Where x + delta already lies in [0, 1] the sum passes through exactly.
    """
    if delta.shape[0] != pixels.shape[0] or delta.shape[2:] != pixels.shape[2:]:
        raise ValueError(
            f"shape mismatch: x {tuple(pixels.shape)} vs delta {tuple(delta.shape)}")
    if delta.shape[1] not in (1, pixels.shape[1]):
        raise ValueError(
            f"delta channels must be 1 or {pixels.shape[1]}, got {delta.shape[1]}")
    return (pixels + delta).clamp(0.0, 1.0)


@dataclass
class UaaTrainConfig:
    """Stage-1 recipe: budget, epochs, smoothing, optimizer, proxy, seed."""

    epsilon: float = 0.03
    epochs: int = 10
    smoothing: float = 0.1
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    proxy_arch: str = "small_cnn"
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        PerturbationBudget(self.epsilon)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must be in [0, 1)")
        # validates strict monotonicity / range of explicit milestones
        self.optimizer.resolved_milestones(self.epochs)

    def to_config(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "epochs": self.epochs,
            "smoothing": self.smoothing,
            "optimizer": self.optimizer.to_config(),
            "proxy_arch": self.proxy_arch,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @staticmethod
    def from_config(cfg: dict) -> "UaaTrainConfig":
        cfg = dict(cfg)
        if "optimizer" in cfg and isinstance(cfg["optimizer"], dict):
            cfg["optimizer"] = OptimizerSpec.from_config(cfg["optimizer"])
        return UaaTrainConfig(**cfg)


@dataclass
class GeneratorCheckpoint:
    """A trained, permanently frozen generator plus its training record."""

    generator: torch.nn.Module
    config: UaaTrainConfig
    loss_trace: List[float]

    def __post_init__(self):
        if not is_frozen(self.generator):
            freeze(self.generator)


def uaa_stage1_train(config: UaaTrainConfig, data: DatasetSplit,
                     log_path: Optional[str] = None) -> GeneratorCheckpoint:
    """Train the perturbation generator against per-epoch fresh proxies.

    Each epoch: re-initialize the proxy classifier under a seed derived from
    (config.seed, epoch), freeze it, then update the generator to maximize
    the proxy's label-smoothed cross-entropy on the composed adversarial
    inputs. Aborts if the objective explodes or goes non-finite for two
    consecutive epochs. Returns the frozen generator with its per-epoch mean
    adversarial loss trace.
    """
    if len(data) == 0:
        raise ValueError("empty data stream")
    num_classes = data.num_classes
    input_shape = data.image_shape

    generator = build_generator(input_shape, seed=derive_seed(config.seed, "generator"))
    optimizer = make_optimizer(generator.parameters(), config.optimizer)
    scheduler = make_scheduler(optimizer, config.optimizer, config.epochs)
    metrics = MetricsLogger(log_path, tag="stage1")

    loss_trace: List[float] = []
    nonfinite_epochs = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        proxy_seed = derive_seed(config.seed, epoch)
        proxy = freeze(build_classifier(config.proxy_arch, num_classes,
                                        proxy_seed, input_shape))
        epoch_losses = []
        for batch in data.batches(config.batch_size,
                                  shuffle_seed=derive_seed(config.seed, "order", epoch)):
            targets = make_soft_labels(batch.labels, num_classes, config.smoothing)
            raw = generator(batch.pixels)
            delta = bound_perturbation(raw, config.epsilon)
            x_adv = compose_adversarial(batch.pixels, delta)
            adv_loss = soft_cross_entropy(proxy(x_adv), targets.probs)
            objective = -adv_loss
            if torch.isfinite(objective) and abs(objective.item()) > LOSS_ABORT_THRESHOLD:
                raise NonFiniteLossError(
                    f"stage-1 objective magnitude {abs(objective.item()):.3g} "
                    f"exceeded {LOSS_ABORT_THRESHOLD:g} at epoch {epoch}")
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            epoch_losses.append(float(adv_loss.detach()))

        mean_loss = sum(epoch_losses) / len(epoch_losses)
        if not math.isfinite(mean_loss):
            nonfinite_epochs += 1
            if nonfinite_epochs >= 2:
                raise NonFiniteLossError(
                    f"non-finite stage-1 loss for two consecutive epochs "
                    f"(last mean={mean_loss})")
        else:
            nonfinite_epochs = 0
        loss_trace.append(mean_loss)
        scheduler.step()
        metrics.log(epoch=epoch, mean_adv_loss=mean_loss,
                    lr=optimizer.param_groups[0]["lr"],
                    proxy_checksum=param_checksum(proxy)[:12],
                    wall_time=time.perf_counter() - t0)

    freeze(generator)
    return GeneratorCheckpoint(generator=generator, config=config,
                               loss_trace=loss_trace)


def uaa_augment(batch: ImageBatch, ckpt: GeneratorCheckpoint,
                epsilon_override: Optional[float] = None) -> ImageBatch:
    """Apply the frozen generator as a deterministic augmentation.

    Guarantees max |out - x| <= eps and out in [0, 1]. No gradients reach
    the generator; an epsilon_override of 0 returns the batch unchanged.
    """
    expected_hw = ckpt.generator.input_shape[1:]
    if tuple(batch.pixels.shape[2:]) != tuple(expected_hw):
        raise ValueError(
            f"checkpoint expects {expected_hw} images, got {tuple(batch.pixels.shape[2:])}")
    epsilon = ckpt.config.epsilon if epsilon_override is None else epsilon_override
    with torch.no_grad():
        raw = ckpt.generator(batch.pixels)
        delta = bound_perturbation(raw, epsilon)
        out = compose_adversarial(batch.pixels, delta)
    return ImageBatch(out, batch.labels)


def save_generator_checkpoint(ckpt: GeneratorCheckpoint, path) -> None:
    """Write manifest + config snapshot + loss trace + parameter blob."""
    import datetime

    payload = {
        "manifest": {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "generator",
            "arch": "perturbation_generator",
            "input_shape": list(ckpt.generator.input_shape),
            "epsilon": ckpt.config.epsilon,
            "epochs": ckpt.config.epochs,
            "seed": ckpt.config.seed,
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        },
        "config": ckpt.config.to_config(),
        "loss_trace": list(ckpt.loss_trace),
        "state_dict": ckpt.generator.state_dict(),
    }
    torch.save(payload, path)


def load_generator_checkpoint(path) -> GeneratorCheckpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    manifest = payload.get("manifest", {})
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    if manifest.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    config = UaaTrainConfig.from_config(payload["config"])
    generator = build_generator(tuple(manifest["input_shape"]), seed=0)
    generator.load_state_dict(payload["state_dict"])
    freeze(generator)
    return GeneratorCheckpoint(generator=generator, config=config,
                               loss_trace=list(payload["loss_trace"]))
