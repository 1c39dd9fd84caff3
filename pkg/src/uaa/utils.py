"""Seeding, checksum and small numeric helpers shared across the package.

All randomness in this package flows through explicit integer seeds so that
paired runs can share data order and initialization while differing only in
the treatment variable. ``derive_seed`` gives a stable, platform-independent
way to split one seed into many independent streams.
"""

from __future__ import annotations

import hashlib
import json
import logging
from typing import Any, Optional

import numpy as np
import torch

__all__ = [
    "derive_seed",
    "torch_generator",
    "numpy_generator",
    "param_checksum",
    "tensor_checksum",
    "stable_hash",
    "MetricsLogger",
]

logger = logging.getLogger("uaa")


def stable_hash(obj: Any) -> str:
    """Hex sha256 of a JSON-serializable object, stable across processes."""
    payload = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()


def derive_seed(*parts: Any) -> int:
    """Derive a 31-bit seed from arbitrary parts (ints, strings, tuples).

    Unlike builtin ``hash`` this is stable across interpreter runs, so
    per-epoch proxy seeds and per-batch augmentation seeds are reproducible.
    """
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:4], "big") % (2**31 - 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def numpy_generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def tensor_checksum(t: torch.Tensor) -> str:
    """Hex sha256 of a tensor's raw little-endian bytes."""
    arr = t.detach().cpu().contiguous().numpy()
    return hashlib.sha256(arr.tobytes()).hexdigest()


def param_checksum(model: torch.nn.Module) -> str:
    """Checksum over all parameters and buffers, keyed by name.

    Buffers are included so that BatchNorm running statistics count as
    state: a frozen model must keep them fixed too.
    """
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        value = state[name]
        if isinstance(value, torch.Tensor):
            h.update(value.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(value).encode())
    return h.hexdigest()


class MetricsLogger:
    """Per-epoch metrics as JSON lines to a file, mirrored to the log.

    Records carry whatever fields the caller passes (epoch, mean loss,
    learning rate, wall time, ...). A ``path`` of None logs to stdout only.
    """

    def __init__(self, path: Optional[str] = None, tag: str = "train"):
        self.path = path
        self.tag = tag
        self.records: list[dict] = []

    def log(self, **fields: Any) -> dict:
        record = dict(fields)
        self.records.append(record)
        line = json.dumps(record, sort_keys=True, default=str)
        logger.info("[%s] %s", self.tag, line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        return record
