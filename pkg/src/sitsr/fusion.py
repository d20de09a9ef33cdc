"""Temporal fusion of per-frame feature maps.

``LTAE2d`` is a master-query multi-head temporal attention applied
independently at every pixel with shared weights. ``RecursiveFusion`` is the
pairwise halving scheme of HighRes-net. ``median_reference`` builds the
per-pixel median image that HighRes-net concatenates to each frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import ConfigError, DomainError, Raster, TimedSeries
from .encoding import EncodingConfig, encode_offsets_torch


@dataclass(frozen=True)
class FusionConfig:
    heads: int = 4
    d_k: int = 8
    mlp_hidden: Optional[int] = None  # defaults to the channel count
    positional: str = "relative"  # or "absolute"

    def __post_init__(self):
        if self.heads < 1 or self.d_k < 1:
            raise ConfigError("heads and d_k must be positive")
        if self.positional not in ("relative", "absolute"):
            raise ConfigError(f"unknown positional encoding {self.positional!r}")


def frame_offsets(gaps: torch.Tensor, mask: Optional[torch.Tensor], positional: str) -> torch.Tensor:
    """Day offsets fed to the encoding. ``gaps`` holds t_k - t_ref."""
    if positional == "relative":
        return gaps
    big = torch.iinfo(torch.int64).max
    g = gaps if mask is None else gaps.masked_fill(~mask, big)
    return gaps - g.min(dim=-1, keepdim=True).values


class LTAE2d(nn.Module):
    """Per-pixel lightweight temporal attention.

    Channels are split into ``heads`` groups. Each head has one learned
    master query. Keys come from the channel group plus the projected
    positional encoding; values are the raw channel group, so every head
    output is a convex combination of input features. Head outputs are
    concatenated and passed through a pixel-wise MLP.
    """

    def __init__(self, channels: int, fusion: FusionConfig = FusionConfig(),
                 encoding: Optional[EncodingConfig] = None):
        super().__init__()
        if channels % fusion.heads:
            raise ConfigError(f"channels={channels} not divisible by heads={fusion.heads}")
        self.channels = channels
        self.heads = fusion.heads
        self.d_k = fusion.d_k
        self.positional = fusion.positional
        self.group = channels // fusion.heads
        self.encoding = encoding or EncodingConfig(c_e=fusion.heads * 8, heads=fusion.heads)
        if self.encoding.heads != fusion.heads:
            raise ConfigError("encoding heads must equal fusion heads")
        d = self.encoding.d
        hidden = fusion.mlp_hidden or channels

        self.query = nn.Parameter(torch.randn(self.heads, self.d_k) / math.sqrt(self.d_k))
        self.key_weight = nn.Parameter(torch.randn(self.heads, self.d_k, self.group) / math.sqrt(self.group))
        self.key_bias = nn.Parameter(torch.zeros(self.heads, self.d_k))
        self.pos_weight = nn.Parameter(torch.randn(self.heads, self.group, d) / math.sqrt(d))
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x: torch.Tensor, pos: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """x: B x T x C x H x W, pos: B x T x d encodings, mask: B x T (True = real frame).

        Returns ``(fused B x C x H x W, attention B x heads x T x H x W)``.
        """
        B, T, C, H, W = x.shape
        if T == 0:
            raise DomainError("cannot fuse an empty series")
        if C != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {C}")
        xg = x.reshape(B, T, self.heads, self.group, H, W)
        pe = torch.einsum("hgd,btd->bthg", self.pos_weight, pos.to(x.dtype))
        keys = torch.einsum("hkg,bthgyx->bthkyx", self.key_weight, xg + pe[..., None, None])
        keys = keys + self.key_bias[None, None, :, :, None, None]
        logits = torch.einsum("hk,bthkyx->bthyx", self.query, keys) / math.sqrt(self.d_k)
        if mask is not None:
            logits = logits.masked_fill(~mask[:, :, None, None, None], float("-inf"))
        work = torch.promote_types(logits.dtype, torch.float32)
        attn = torch.softmax(logits.to(work), dim=1).to(x.dtype)
        heads_out = torch.einsum("bthyx,bthgyx->bhgyx", attn, xg).reshape(B, C, H, W)
        return self.mlp(heads_out), attn.permute(0, 2, 1, 3, 4)

    def encode(self, gaps: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return encode_offsets_torch(frame_offsets(gaps, mask, self.positional), self.encoding,
                                    dtype=self.query.dtype)


def ltae2d_fuse(features, gaps, params: LTAE2d, mask=None):
    """Fuse one T x C_f x H_f x W_f feature series.

    ``gaps`` are integer day offsets t_k - t_ref. Returns ``(fused, maps)``
    with maps of shape heads x T x H_f x W_f.
    """
    x = torch.as_tensor(features)
    if x.ndim != 4:
        raise DomainError(f"features must be T x C x H x W, got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise DomainError("cannot fuse an empty series")
    if x.shape[1] % params.heads:
        raise ConfigError(f"C_f={x.shape[1]} not divisible by heads={params.heads}")
    g = torch.as_tensor(np.asarray(gaps, dtype=np.int64))[None]
    m = None if mask is None else torch.as_tensor(mask)[None]
    fused, attn = params(x[None], params.encode(g, m), m)
    return fused[0], attn[0]


# -- median reference --------------------------------------------------------

def median_reference(series: TimedSeries) -> Raster:
    """Per-pixel, per-channel median; even T averages the two middle values."""
    if len(series) == 0:
        raise DomainError("median of an empty series")
    stack = series.stack().astype(np.float64)
    s = np.sort(stack, axis=0)
    T = s.shape[0]
    med = 0.5 * (s[(T - 1) // 2] + s[T // 2])
    first = series.frames[0][0]
    return Raster(med.astype(np.float32), first.value_range, first.channels)


def masked_median(x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Median over dim 1 of B x T x ... ignoring masked-out frames."""
    if mask is None:
        s = torch.sort(x, dim=1).values
        T = x.shape[1]
        return 0.5 * (s[:, (T - 1) // 2] + s[:, T // 2])
    shape = (x.shape[0], x.shape[1]) + (1,) * (x.ndim - 2)
    filled = torch.where(mask.reshape(shape), x, torch.full_like(x, float("inf")))
    s = torch.sort(filled, dim=1).values
    n = mask.sum(dim=1)
    lo = ((n - 1) // 2).reshape((-1, 1) + (1,) * (x.ndim - 2)).expand(-1, 1, *x.shape[2:])
    hi = (n // 2).reshape((-1, 1) + (1,) * (x.ndim - 2)).expand(-1, 1, *x.shape[2:])
    return 0.5 * (torch.gather(s, 1, lo) + torch.gather(s, 1, hi)).squeeze(1)


# -- recursive fusion ----------------------------------------------------------

def next_power_of_two(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def closeness_order(gaps: Sequence[int]) -> list[int]:
    """Frame indices by |gap|, ties toward the earlier date, then lower index."""
    return sorted(range(len(gaps)), key=lambda k: (abs(int(gaps[k])), int(gaps[k]), k))


def padding_indices(gaps: Sequence[int], target: Optional[int] = None) -> list[int]:
    """Original frame order followed by repeats of the frames closest to t_ref.

    ``target`` defaults to the next power of two. Repeats cycle through the
    closeness order when more padding than frames is needed.
    """
    n = len(gaps)
    if n == 0:
        raise DomainError("cannot pad an empty series")
    target = next_power_of_two(n) if target is None else target
    order = closeness_order(gaps)
    return list(range(n)) + [order[i % n] for i in range(target - n)]


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.PReLU(),
            nn.Conv2d(ch, ch, 3, padding=1), nn.PReLU(),
        )

    def forward(self, x):
        return x + self.body(x)


class RecursiveFusion(nn.Module):
    """Fuses 2^k states pairwise with one shared block until one remains.

    States are paired first-half with the reversed second half. The number
    of rounds is log2 of the padded length.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Sequential(
            _ResBlock(2 * channels),
            nn.Conv2d(2 * channels, channels, 3, padding=1),
            nn.PReLU(),
        )
        self.rounds_run = 0

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        """states: B x T x C x H x W with T a power of two."""
        B, T, C, H, W = states.shape
        if T & (T - 1):
            raise DomainError(f"recursive fusion needs a power-of-two length, got {T}")
        rounds = 0
        while T > 1:
            half = T // 2
            alice = states[:, :half]
            bob = states[:, half:].flip(1)
            pair = torch.cat([alice, bob], dim=2).reshape(B * half, 2 * C, H, W)
            states = alice + self.fuse(pair).reshape(B, half, C, H, W)
            T = half
            rounds += 1
        self.rounds_run = rounds
        return states[:, 0]


def recursive_fuse(states: Sequence, block: RecursiveFusion, gaps: Optional[Sequence[int]] = None):
    """Pad a list of C x H x W states to a power of two and fuse recursively."""
    n = len(states)
    if n == 0:
        raise DomainError("cannot fuse an empty series")
    gaps = [0] * n if gaps is None else list(gaps)
    idx = padding_indices(gaps)
    x = torch.stack([torch.as_tensor(states[i]) for i in idx])[None]
    return block(x)[0]
