"""Classifier zoo and the perturbation generator network.

All classifiers map [N,C,H,W] pixels in [0,1] to [N,K] logits and are built
deterministically under an integer seed. ``small_cnn`` is the desk-scale
reference model used throughout the tests; its exact layout is fixed here so
tests are portable:

    conv 3x3 (C_in -> 32) + ReLU
    conv 3x3 (32 -> 64)   + ReLU
    maxpool stride 2
    conv 3x3 (64 -> 128)  + ReLU
    maxpool stride 2
    conv 3x3 (128 -> 128) + ReLU
    flatten -> linear (128 * H/4 * W/4 -> K)

The generator is a VGG-style fully-convolutional encoder-decoder: three
conv+pool downsampling stages (total factor 8), 1x1 bottleneck convolutions,
then nearest-neighbor-upsample+conv stages back to full resolution, ending in
a single-channel perturbation map with no output activation (bounding is the
caller's job). Convolutions keep torch's default fan-in-scaled uniform init.
"""

from __future__ import annotations

import datetime
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch, SoftLabelBatch

__all__ = [
    "CLASSIFIER_ARCHS",
    "CHECKPOINT_FORMAT_VERSION",
    "NonFiniteLossError",
    "SmallCnn",
    "CifarResNet",
    "WideResNet",
    "PerturbationGenerator",
    "build_classifier",
    "build_generator",
    "reinitialize",
    "freeze",
    "is_frozen",
    "gradient_wrt_input",
    "save_checkpoint",
    "load_checkpoint",
    "load_classifier",
]

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """A loss or gradient came out NaN/inf (usually exploded inputs)."""


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

class SmallCnn(nn.Module):
    """Four conv layers (32-64-128-128) with two stride-2 poolings."""

    def __init__(self, num_classes: int, input_shape=(3, 32, 32)):
        super().__init__()
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ValueError("small_cnn needs H, W divisible by 4")
        self.conv1 = nn.Conv2d(c, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.conv3 = nn.Conv2d(64, 128, 3, padding=1)
        self.conv4 = nn.Conv2d(128, 128, 3, padding=1)
        self.fc = nn.Linear(128 * (h // 4) * (w // 4), num_classes)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.max_pool2d(F.relu(self.conv3(x)), 2)
        x = F.relu(self.conv4(x))
        return self.fc(torch.flatten(x, 1))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout * self.expansion:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout * self.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout * self.expansion),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv3 = nn.Conv2d(cout, cout * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout * self.expansion)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout * self.expansion:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout * self.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout * self.expansion),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """ResNet with the 3x3 stride-1 stem used for 32x32 inputs."""

    def __init__(self, block, num_blocks: Sequence[int], num_classes: int,
                 input_shape=(3, 32, 32)):
        super().__init__()
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ValueError("resnet needs H, W divisible by 4")
        self.in_planes = 64
        self.conv1 = nn.Conv2d(c, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(block, 64, num_blocks[0], 1)
        self.layer2 = self._make_layer(block, 128, num_blocks[1], 2)
        self.layer3 = self._make_layer(block, 256, num_blocks[2], 2)
        self.layer4 = self._make_layer(block, 512, num_blocks[3], 2)
        self.fc = nn.Linear(512 * block.expansion, num_classes)

    def _make_layer(self, block, planes, count, stride):
        layers = []
        for s in [stride] + [1] * (count - 1):
            layers.append(block(self.in_planes, planes, s))
            self.in_planes = planes * block.expansion
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(out)


class WideBasic(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        residual = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + residual


class WideResNet(nn.Module):
    """Pre-activation wide residual network (depth 34, widen factor 10)."""

    def __init__(self, num_classes: int, depth: int = 34, widen: int = 10,
                 input_shape=(3, 32, 32)):
        super().__init__()
        if (depth - 4) % 6:
            raise ValueError("WideResNet depth must be 6n+4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ValueError("wide resnet needs H, W divisible by 4")
        self.conv1 = nn.Conv2d(c, widths[0], 3, padding=1, bias=False)
        blocks = []
        cin = widths[0]
        for cout, stride in zip(widths[1:], [1, 2, 2]):
            for j in range(n):
                blocks.append(WideBasic(cin, cout, stride if j == 0 else 1))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(widths[3])
        self.fc = nn.Linear(widths[3], num_classes)

    def forward(self, x):
        out = self.blocks(self.conv1(x))
        out = F.relu(self.bn(out))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(out)


class PerturbationGenerator(nn.Module):
    """Fully-convolutional encoder-decoder emitting a raw perturbation map.

    Input [N,C,H,W] -> output [N,1,H,W]; H and W must be divisible by the
    total downsampling factor (8). The raw map is unbounded by design; the
    L-inf budget is applied by the augmentation step downstream.
    """

    DOWNSAMPLING_FACTOR = 8

    def __init__(self, input_shape=(3, 32, 32), out_channels: int = 1):
        super().__init__()
        c, h, w = input_shape
        if h % self.DOWNSAMPLING_FACTOR or w % self.DOWNSAMPLING_FACTOR:
            raise ValueError(
                f"H, W must be divisible by {self.DOWNSAMPLING_FACTOR}, got {h}x{w}")
        self.out_channels = out_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(c, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.bottleneck = nn.Sequential(
            nn.Conv2d(128, 128, 1), nn.ReLU(inplace=True),
            nn.Conv2d(128, 128, 1), nn.ReLU(inplace=True),
        )
        # nearest-neighbor upsample + conv avoids checkerboard artifacts
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(128, 64, 3, padding=1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, out_channels, 3, padding=1),
        )

    def forward(self, x):
        return self.decoder(self.bottleneck(self.encoder(x)))


# ---------------------------------------------------------------------------
# builders and parameter controls
# ---------------------------------------------------------------------------

def _small_cnn(num_classes, input_shape):
    return SmallCnn(num_classes, input_shape)


def _resnet18(num_classes, input_shape):
    return CifarResNet(BasicBlock, [2, 2, 2, 2], num_classes, input_shape)


def _resnet50(num_classes, input_shape):
    return CifarResNet(Bottleneck, [3, 4, 6, 3], num_classes, input_shape)


def _wrn34_10(num_classes, input_shape):
    return WideResNet(num_classes, depth=34, widen=10, input_shape=input_shape)


CLASSIFIER_ARCHS = {
    "small_cnn": _small_cnn,
    "resnet18": _resnet18,
    "resnet50": _resnet50,
    "wrn34_10": _wrn34_10,
}


def build_classifier(arch: str, num_classes: int, seed: int,
                     input_shape=(3, 32, 32)) -> nn.Module:
    """Build a classifier with its standard init scheme, deterministic in seed."""
    if arch not in CLASSIFIER_ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(CLASSIFIER_ARCHS)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CLASSIFIER_ARCHS[arch](num_classes, tuple(input_shape))
    model.arch = arch
    model.num_classes = num_classes
    model.input_shape = tuple(input_shape)
    model.frozen = False
    return model


def build_generator(input_shape=(3, 32, 32), seed: int = 0) -> PerturbationGenerator:
    """Build the encoder-decoder generator, deterministic in seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = PerturbationGenerator(tuple(input_shape))
    gen.input_shape = tuple(input_shape)
    gen.frozen = False
    return gen


def freeze(model: nn.Module) -> nn.Module:
    """Detach a model from training: no grads, eval mode, frozen flag set."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model.frozen = True
    return model


def is_frozen(model: nn.Module) -> bool:
    return bool(getattr(model, "frozen", False)) and \
        not any(p.requires_grad for p in model.parameters())


def reinitialize(model: nn.Module, seed: int) -> nn.Module:
    """Redraw all parameters from the init scheme and freeze the model.

    The redraw matches ``build_classifier(arch, K, seed)`` exactly, so equal
    seeds give equal checksums. Running statistics reset with the rest.
    """
    fresh = build_classifier(model.arch, model.num_classes, seed, model.input_shape)
    model.load_state_dict(fresh.state_dict())
    return freeze(model)


# ---------------------------------------------------------------------------
# input gradients
# ---------------------------------------------------------------------------

def soft_cross_entropy(logits: torch.Tensor, probs: torch.Tensor,
                       reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy against probability targets (label smoothing included)."""
    loss = -(probs * F.log_softmax(logits, dim=1)).sum(dim=1)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def cw_margin(logits: torch.Tensor, labels: torch.Tensor,
              kappa: float = 0.0) -> torch.Tensor:
    """Per-sample margin max(Z_y - max_{i!=y} Z_i, -kappa).

    Driving this down pushes the true-class logit below the runner-up; it
    saturates (zero gradient) once the margin falls below -kappa.
    """
    true_logit = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    runner_up = masked.max(dim=1).values
    return (true_logit - runner_up).clamp(min=-kappa)


def gradient_wrt_input(model: nn.Module, batch: ImageBatch,
                       targets: SoftLabelBatch, loss: str = "cross_entropy",
                       kappa: float = 0.0) -> torch.Tensor:
    """Gradient of the summed per-sample loss w.r.t. the input pixels.

    Sum reduction makes the batched gradient equal per-sample gradients
    computed one at a time. Model parameters are untouched (no .grad set).
    The model must be in eval mode so samples do not couple through norm
    layers.
    """
    if model.training:
        raise ValueError("model must be in eval mode for input gradients")
    dtype = next(model.parameters()).dtype
    x = batch.pixels.detach().to(dtype).requires_grad_(True)
    logits = model(x)
    if loss == "cross_entropy":
        total = soft_cross_entropy(logits, targets.probs.to(dtype), reduction="sum")
    elif loss == "cw_margin":
        labels = targets.probs.argmax(dim=1)
        total = cw_margin(logits, labels, kappa=kappa).sum()
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite {loss} loss: {total.item()}")
    (grad,) = torch.autograd.grad(total, x)
    return grad


# ---------------------------------------------------------------------------
# checkpoint files: manifest + parameter blob
# ---------------------------------------------------------------------------

def _manifest(kind: str, arch: str, num_classes: Optional[int], input_shape,
              seed: Optional[int], epsilon: Optional[float],
              epochs: Optional[int]) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "num_classes": num_classes,
        "input_shape": list(input_shape),
        "seed": seed,
        "epsilon": epsilon,
        "epochs": epochs,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def save_checkpoint(model: nn.Module, path, *, kind: str, seed: Optional[int] = None,
                    epsilon: Optional[float] = None, epochs: Optional[int] = None,
                    extra: Optional[dict] = None) -> dict:
    """Write a checkpoint: manifest record plus the parameter blob."""
    manifest = _manifest(kind, getattr(model, "arch", "generator"),
                         getattr(model, "num_classes", None),
                         getattr(model, "input_shape", ()), seed, epsilon, epochs)
    payload = {"manifest": manifest, "state_dict": model.state_dict()}
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return manifest


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    manifest = payload.get("manifest")
    if manifest is None or manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    return payload


def load_classifier(path) -> nn.Module:
    """Load a classifier checkpoint, validating arch id and shape table."""
    payload = load_checkpoint(path)
    man = payload["manifest"]
    if man["kind"] != "classifier":
        raise ValueError(f"{path} is a {man['kind']!r} checkpoint, expected classifier")
    if man["arch"] not in CLASSIFIER_ARCHS:
        raise ValueError(f"unknown architecture id {man['arch']!r} in checkpoint")
    model = build_classifier(man["arch"], man["num_classes"], seed=0,
                             input_shape=tuple(man["input_shape"]))
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    actual = {k: tuple(v.shape) for k, v in payload["state_dict"].items()}
    if expected != actual:
        raise ValueError(f"checkpoint shape table does not match {man['arch']}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
