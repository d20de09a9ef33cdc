"""Sine positional encodings for irregularly dated frames.

Row k of an encoding is ``sin(delta_k / tau ** (i / d))`` for ``i = 1..d``
with ``d = c_e / heads``. The absolute variant measures ``delta_k`` from the
earliest frame of the series; the relative variant measures it from the
reference date, which makes it invariant to global time shifts and to the
insertion or removal of other frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import ConfigError, DomainError, Timestamp


@dataclass(frozen=True)
class EncodingConfig:
    tau: float = 1000.0
    c_e: int = 128
    heads: int = 4

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.c_e < 1 or self.heads < 1:
            raise ConfigError("c_e and heads must be positive")
        if self.c_e % self.heads:
            raise ConfigError(f"c_e={self.c_e} not divisible by heads={self.heads}")

    @property
    def d(self) -> int:
        return self.c_e // self.heads

    def frequencies(self) -> np.ndarray:
        i = np.arange(1, self.d + 1, dtype=np.float64)
        return 1.0 / np.power(float(self.tau), i / self.d)


def _days(timestamps: Sequence) -> np.ndarray:
    if len(timestamps) == 0:
        raise DomainError("positional encoding needs at least one timestamp")
    return np.array([Timestamp.parse(t).epoch_day for t in timestamps], dtype=np.int64)


def encode_offsets(offsets, cfg: EncodingConfig) -> np.ndarray:
    """T x d matrix for integer day offsets."""
    off = np.asarray(offsets, dtype=np.int64).astype(np.float64)
    return np.sin(off[:, None] * cfg.frequencies()[None, :])


def absolute_encoding(timestamps: Sequence, cfg: EncodingConfig) -> np.ndarray:
    days = _days(timestamps)
    return encode_offsets(days - days.min(), cfg)


def relative_encoding(timestamps: Sequence, t_ref, cfg: EncodingConfig) -> np.ndarray:
    days = _days(timestamps)
    return encode_offsets(days - Timestamp.parse(t_ref).epoch_day, cfg)


def encode_offsets_torch(offsets: torch.Tensor, cfg: EncodingConfig, dtype=torch.float32) -> torch.Tensor:
    """Batched variant: ``offsets`` of shape (..., T) -> (..., T, d).

    Computed in float64 then cast. Only integer offsets enter, so the result
    depends on day differences alone.
    """
    freqs = torch.from_numpy(cfg.frequencies())
    enc = torch.sin(offsets.to(torch.float64)[..., None] * freqs)
    return enc.to(dtype)
