"""Adversarial attacks used for evaluation and for the PGD-AT baseline.

All white-box attacks share one L-inf budget semantics: the output always
satisfies max |x' - x| <= eps and stays in [0, 1]. A zero budget is the null
attack and returns the input unchanged, for every family. Attacks never
modify model parameters; gradients are taken with respect to inputs only.

The pixel attack is black-box: it sees the model through a
predict-probabilities oracle and runs differential evolution (rand/1/bin,
population 400, scale 0.5, crossover 0.9 by default) over candidate pixel
edits, minimizing the true-class probability.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch, make_soft_labels
from .models import gradient_wrt_input
from .utils import derive_seed, numpy_generator, torch_generator

__all__ = [
    "ATTACK_FAMILIES",
    "AttackConfig",
    "fgsm",
    "rfgsm",
    "pgd",
    "cw_attack",
    "pixel_attack",
    "run_attack",
    "probability_oracle",
]

ATTACK_FAMILIES = ("fgsm", "rfgsm", "pgd", "cw", "pixel")

# community-standard CIFAR-scale L-inf evaluation budget
DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_STEP_SIZE = 2.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    """Attack family plus its budget/step/iteration parameters.

    ``epsilon`` may be 0 to express the null attack (used by the
    null-attack-equals-clean evaluation identity); real attacks require a
    positive budget.
    """

    family: str
    epsilon: float = DEFAULT_EPSILON
    step_size: float = DEFAULT_STEP_SIZE
    iterations: int = 10
    random_start: bool = False
    kappa: float = 0.0
    pixel_count: int = 1
    de_population: int = 400
    de_iterations: int = 100
    de_scale: float = 0.5
    de_crossover: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.family in ("pgd", "cw") and self.step_size <= 0:
            raise ValueError("iterative attacks need step_size > 0")
        if self.pixel_count < 1:
            raise ValueError("pixel_count must be >= 1")

    def reseeded(self, *parts) -> "AttackConfig":
        return replace(self, seed=derive_seed(self.seed, *parts))

    # convenience constructors with the per-family iteration defaults
    @staticmethod
    def make_fgsm(epsilon: float = DEFAULT_EPSILON, seed: int = 0) -> "AttackConfig":
        return AttackConfig("fgsm", epsilon=epsilon, iterations=1, seed=seed)

    @staticmethod
    def make_rfgsm(epsilon: float = DEFAULT_EPSILON, seed: int = 0) -> "AttackConfig":
        return AttackConfig("rfgsm", epsilon=epsilon, iterations=1, seed=seed)

    @staticmethod
    def make_pgd(epsilon: float = DEFAULT_EPSILON, step_size: float = DEFAULT_STEP_SIZE,
                 iterations: int = 10, random_start: bool = True,
                 seed: int = 0) -> "AttackConfig":
        return AttackConfig("pgd", epsilon=epsilon, step_size=step_size,
                            iterations=iterations, random_start=random_start, seed=seed)

    @staticmethod
    def make_cw(epsilon: float = DEFAULT_EPSILON, step_size: float = DEFAULT_STEP_SIZE,
                iterations: int = 30, kappa: float = 0.0, seed: int = 0) -> "AttackConfig":
        return AttackConfig("cw", epsilon=epsilon, step_size=step_size,
                            iterations=iterations, kappa=kappa, seed=seed)

    @staticmethod
    def make_pixel(pixel_count: int = 1, de_population: int = 400,
                   de_iterations: int = 100, seed: int = 0) -> "AttackConfig":
        return AttackConfig("pixel", pixel_count=pixel_count,
                            de_population=de_population,
                            de_iterations=de_iterations, seed=seed)

    def to_config(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @staticmethod
    def from_config(cfg: dict) -> "AttackConfig":
        return AttackConfig(**cfg)


def _num_classes(model, pixels: torch.Tensor) -> int:
    k = getattr(model, "num_classes", None)
    if k is None:
        with torch.no_grad():
            k = int(model(pixels[:1]).shape[1])
    return int(k)


def _ce_grad_sign(model, pixels: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = _num_classes(model, pixels)
    targets = make_soft_labels(labels, k, 0.0)
    grad = gradient_wrt_input(model, ImageBatch(pixels, labels), targets,
                              loss="cross_entropy")
    return grad.sign().to(pixels.dtype)


def _project(adv: torch.Tensor, origin: torch.Tensor, epsilon: float) -> torch.Tensor:
    return torch.min(torch.max(adv, origin - epsilon), origin + epsilon).clamp(0.0, 1.0)


def fgsm(model, batch: ImageBatch, cfg: AttackConfig) -> ImageBatch:
    """Single signed-gradient step of size eps on the cross-entropy loss."""
    if cfg.epsilon == 0:
        return batch.clone()
    sign = _ce_grad_sign(model, batch.pixels, batch.labels)
    adv = (batch.pixels + cfg.epsilon * sign).clamp(0.0, 1.0)
    return ImageBatch(adv, batch.labels)


def _rfgsm_impl(model, batch: ImageBatch, epsilon: float, init_scale: float,
                step: float, seed: int) -> ImageBatch:
    gen = torch_generator(derive_seed(seed, "rfgsm_init"))
    noise = (torch.rand(batch.pixels.shape, generator=gen) * 2.0 - 1.0) * init_scale
    start = (batch.pixels + noise).clamp(0.0, 1.0)
    sign = _ce_grad_sign(model, start, batch.labels)
    adv = _project(start + step * sign, batch.pixels, epsilon)
    return ImageBatch(adv, batch.labels)


def rfgsm(model, batch: ImageBatch, cfg: AttackConfig) -> ImageBatch:
    """Random start in [-eps/2, eps/2], one eps/2 step, projected to the ball."""
    if cfg.epsilon == 0:
        return batch.clone()
    return _rfgsm_impl(model, batch, cfg.epsilon, init_scale=cfg.epsilon / 2.0,
                       step=cfg.epsilon / 2.0, seed=cfg.seed)


def pgd(model, batch: ImageBatch, cfg: AttackConfig) -> ImageBatch:
    """Iterated signed-gradient ascent projected onto the eps-ball and [0,1]."""
    if cfg.epsilon == 0:
        return batch.clone()
    origin = batch.pixels
    adv = origin
    if cfg.random_start:
        gen = torch_generator(derive_seed(cfg.seed, "pgd_init"))
        noise = (torch.rand(origin.shape, generator=gen) * 2.0 - 1.0) * cfg.epsilon
        adv = _project(origin + noise, origin, cfg.epsilon)
    for _ in range(cfg.iterations):
        sign = _ce_grad_sign(model, adv, batch.labels)
        adv = _project(adv + cfg.step_size * sign, origin, cfg.epsilon)
    return ImageBatch(adv, batch.labels)


def cw_attack(model, batch: ImageBatch, cfg: AttackConfig) -> ImageBatch:
    """Margin-loss variant: drive max(Z_y - max_{i!=y} Z_i, -kappa) down
    with projected signed-gradient steps under the same L-inf budget."""
    if cfg.epsilon == 0:
        return batch.clone()
    k = _num_classes(model, batch.pixels)
    origin = batch.pixels
    adv = origin
    for _ in range(cfg.iterations):
        targets = make_soft_labels(batch.labels, k, 0.0)
        grad = gradient_wrt_input(model, ImageBatch(adv, batch.labels), targets,
                                  loss="cw_margin", kappa=cfg.kappa)
        adv = _project(adv - cfg.step_size * grad.sign().to(adv.dtype),
                       origin, cfg.epsilon)
    return ImageBatch(adv, batch.labels)


# ---------------------------------------------------------------------------
# black-box pixel attack
# ---------------------------------------------------------------------------

def probability_oracle(model) -> Callable[[torch.Tensor], torch.Tensor]:
    """Wrap a model as a gradient-free predict-probabilities oracle."""

    def predict(pixels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return F.softmax(model(pixels), dim=1)

    return predict


def _apply_pixel_candidates(image: torch.Tensor, candidates: np.ndarray) -> torch.Tensor:
    """Materialize [P] candidate edits of one [C,H,W] image into a [P,...] batch."""
    c, h, w = image.shape
    pop = candidates.shape[0]
    per_pixel = 2 + c
    out = image.unsqueeze(0).repeat(pop, 1, 1, 1)
    n_pixels = candidates.shape[1] // per_pixel
    for j in range(n_pixels):
        cols = candidates[:, j * per_pixel:(j + 1) * per_pixel]
        xs = np.clip(cols[:, 0].astype(np.int64), 0, w - 1)
        ys = np.clip(cols[:, 1].astype(np.int64), 0, h - 1)
        vals = torch.from_numpy(np.clip(cols[:, 2:], 0.0, 1.0)).to(image.dtype)
        out[np.arange(pop), :, ys, xs] = vals
    return out


def pixel_attack(model_or_oracle: Union[torch.nn.Module, Callable],
                 batch: ImageBatch, cfg: AttackConfig) -> ImageBatch:
    """Differential-evolution search over few-pixel edits (black box).

    Each candidate encodes (x, y, value per channel) for up to
    ``cfg.pixel_count`` pixels; fitness is the true-class probability, and
    the best-so-far candidate (never worse than the unmodified image) is
    returned once the budget is exhausted or the image is misclassified.
    """
    if cfg.epsilon == 0:
        return batch.clone()
    if isinstance(model_or_oracle, torch.nn.Module):
        predict = probability_oracle(model_or_oracle)
    else:
        predict = model_or_oracle

    pixels = batch.pixels
    n, c, h, w = pixels.shape
    per_pixel = 2 + c
    dims = cfg.pixel_count * per_pixel
    lo = np.tile(np.array([0.0, 0.0] + [0.0] * c), cfg.pixel_count)
    hi = np.tile(np.array([w - 1e-6, h - 1e-6] + [1.0] * c), cfg.pixel_count)

    out = pixels.clone()
    for i in range(n):
        image = pixels[i]
        label = int(batch.labels[i])
        rng = numpy_generator(derive_seed(cfg.seed, "pixel", i))

        def fitness(cands: np.ndarray) -> np.ndarray:
            probs = predict(_apply_pixel_candidates(image, cands))
            return probs[:, label].cpu().numpy()

        best_x, best_fit = None, float(predict(image.unsqueeze(0))[0, label])
        pop = lo + rng.random((cfg.de_population, dims)) * (hi - lo)
        fit = fitness(pop)
        if fit.min() < best_fit:
            best_fit = float(fit.min())
            best_x = pop[int(fit.argmin())].copy()

        def best_misclassified() -> bool:
            if best_x is None:
                return False
            probs = predict(_apply_pixel_candidates(image, best_x[None]))[0]
            return int(probs.argmax()) != label

        for _ in range(cfg.de_iterations):
            if best_misclassified():
                break
            idx = np.array([rng.choice(cfg.de_population, size=3, replace=False)
                            for _ in range(cfg.de_population)])
            mutant = pop[idx[:, 0]] + cfg.de_scale * (pop[idx[:, 1]] - pop[idx[:, 2]])
            mutant = np.clip(mutant, lo, hi)
            cross = rng.random((cfg.de_population, dims)) < cfg.de_crossover
            cross[np.arange(cfg.de_population),
                  rng.integers(0, dims, cfg.de_population)] = True
            trial = np.where(cross, mutant, pop)
            trial_fit = fitness(trial)
            improved = trial_fit <= fit
            pop[improved] = trial[improved]
            fit[improved] = trial_fit[improved]
            if fit.min() < best_fit:
                best_fit = float(fit.min())
                best_x = pop[int(fit.argmin())].copy()

        if best_x is not None:
            out[i] = _apply_pixel_candidates(image, best_x[None])[0]
    return ImageBatch(out, batch.labels)


_WHITE_BOX = {"fgsm": fgsm, "rfgsm": rfgsm, "pgd": pgd, "cw": cw_attack}


def run_attack(model, batch: ImageBatch, cfg: AttackConfig) -> ImageBatch:
    """Dispatch on cfg.family."""
    if cfg.family == "pixel":
        return pixel_attack(model, batch, cfg)
    return _WHITE_BOX[cfg.family](model, batch, cfg)
