"""Per-frame encoders, the sub-pixel decoder and the assembled SR models."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .core import ConfigError, DomainError, Raster, TimedSeries, UsageError, ValueRange
from .encoding import EncodingConfig
from .fusion import (
    FusionConfig,
    LTAE2d,
    RecursiveFusion,
    masked_median,
    next_power_of_two,
    padding_indices,
)

KINDS = (
    "rrdb_sisr",
    "highresnet_recursive",
    "highresnet_ltae",
    "rrdb_ltae",
    "srdiff_bicubic",
    "srdiff_rrdb",
    "srdiff_highresnet_ltae",
)
SISR_KINDS = ("rrdb_sisr", "srdiff_bicubic", "srdiff_rrdb")
DIFFUSION_KINDS = ("srdiff_bicubic", "srdiff_rrdb", "srdiff_highresnet_ltae")
LTAE_KINDS = ("highresnet_ltae", "rrdb_ltae", "srdiff_highresnet_ltae")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "highresnet_ltae"
    scale: int = 4
    in_channels: int = 3
    n_rrdb_blocks: int = 8
    base_channels: int = 64
    growth_channels: Optional[int] = None  # RRDB dense growth, default base/2
    hrn_layers: int = 2  # residual encoding layers in the HighRes-net encoder
    upsampler: str = "pixelshuffle"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(tau=1000.0, c_e=32, heads=4))
    diffusion: dict = field(default_factory=dict)  # see diffusion.DiffusionConfig

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.scale not in (2, 4, 8):
            raise ConfigError(f"scale must be 2, 4 or 8, got {self.scale}")
        if self.n_rrdb_blocks < 1:
            raise ConfigError("n_rrdb_blocks must be >= 1")
        if self.upsampler not in ("pixelshuffle", "transposed"):
            raise ConfigError(f"unknown upsampler {self.upsampler!r}")
        if isinstance(self.fusion, dict):
            object.__setattr__(self, "fusion", FusionConfig(**self.fusion))
        if isinstance(self.encoding, dict):
            object.__setattr__(self, "encoding", EncodingConfig(**self.encoding))
        if self.fusion.heads != self.encoding.heads:
            raise ConfigError("fusion.heads must equal encoding.heads")

    @property
    def is_sisr(self) -> bool:
        return self.kind in SISR_KINDS

    @property
    def is_diffusion(self) -> bool:
        return self.kind in DIFFUSION_KINDS

    @property
    def uses_ltae(self) -> bool:
        return self.kind in LTAE_KINDS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


# -- building blocks -----------------------------------------------------------

class ResidualDenseBlock(nn.Module):
    """Five-conv dense block with residual scaling 0.2 (ESRGAN)."""

    def __init__(self, nf: int, gc: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(nf + i * gc, gc, 3, padding=1) for i in range(4))
        self.conv5 = nn.Conv2d(nf + 4 * gc, nf, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, 1))))
        return x + 0.2 * self.conv5(torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, nf: int, gc: int):
        super().__init__()
        self.blocks = nn.Sequential(*(ResidualDenseBlock(nf, gc) for _ in range(3)))

    def forward(self, x):
        return x + 0.2 * self.blocks(x)


class RRDBEncoder(nn.Module):
    """conv -> n RRDBs -> conv, with a long skip around the trunk."""

    def __init__(self, in_ch: int, nf: int, n_blocks: int, gc: Optional[int] = None):
        super().__init__()
        gc = gc or max(nf // 2, 1)
        self.conv_first = nn.Conv2d(in_ch, nf, 3, padding=1)
        self.trunk = nn.Sequential(*(RRDB(nf, gc) for _ in range(n_blocks)))
        self.trunk_conv = nn.Conv2d(nf, nf, 3, padding=1)

    def forward(self, x):
        fea = self.conv_first(x)
        return fea + self.trunk_conv(self.trunk(fea))


class HighResNetEncoder(nn.Module):
    """Encodes the channel concatenation [LR_i, ref] into a hidden state."""

    def __init__(self, in_ch: int, nf: int, n_layers: int = 2):
        super().__init__()
        self.init = nn.Sequential(nn.Conv2d(2 * in_ch, nf, 3, padding=1), nn.PReLU())
        self.layers = nn.Sequential(*(_Res(nf) for _ in range(n_layers)))
        self.final = nn.Conv2d(nf, nf, 3, padding=1)

    def forward(self, x):
        return self.final(self.layers(self.init(x)))


class _Res(nn.Module):
    def __init__(self, nf):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(nf, nf, 3, padding=1), nn.PReLU(),
            nn.Conv2d(nf, nf, 3, padding=1), nn.PReLU(),
        )

    def forward(self, x):
        return x + self.body(x)


class Decoder(nn.Module):
    """log2(scale) x2 upsampling stages then a final 3x3 convolution."""

    def __init__(self, nf: int, scale: int, out_ch: int = 3, upsampler: str = "pixelshuffle"):
        super().__init__()
        if scale < 2 or scale & (scale - 1):
            raise ConfigError(f"decoder scale must be a power of two >= 2, got {scale}")
        stages = []
        for _ in range(int(np.log2(scale))):
            if upsampler == "pixelshuffle":
                stages += [nn.Conv2d(nf, 4 * nf, 3, padding=1), nn.PixelShuffle(2), nn.PReLU()]
            else:
                stages += [nn.ConvTranspose2d(nf, nf, 4, stride=2, padding=1), nn.PReLU()]
        self.up = nn.Sequential(*stages)
        self.final = nn.Conv2d(nf, out_ch, 3, padding=1)

    def forward(self, x):
        return self.final(self.up(x))


# -- assembled models ----------------------------------------------------------

class SRModel(nn.Module):
    """Encoder -> temporal fusion -> decoder for the non-diffusion kinds.

    ``forward`` takes a batch ``lr`` (B x T x C x h x w), signed day offsets
    ``gaps`` (B x T, t_k - t_ref) and an optional validity ``mask``.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        if spec.is_diffusion:
            raise ConfigError(f"{spec.kind} is a diffusion model; use diffusion.SRDiff")
        self.spec = spec
        nf = spec.base_channels
        if spec.kind.startswith("rrdb"):
            self.encoder = RRDBEncoder(spec.in_channels, nf, spec.n_rrdb_blocks, spec.growth_channels)
        else:
            self.encoder = HighResNetEncoder(spec.in_channels, nf, spec.hrn_layers)
        if spec.uses_ltae:
            self.fusion = LTAE2d(nf, spec.fusion, spec.encoding)
        elif spec.kind == "highresnet_recursive":
            self.fusion = RecursiveFusion(nf)
        else:
            self.fusion = None
        self.decoder = Decoder(nf, spec.scale, spec.in_channels, spec.upsampler)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode_frames(self, lr, mask=None):
        B, T, C, h, w = lr.shape
        if self.spec.kind.startswith("highresnet"):
            ref = masked_median(lr, mask)
            x = torch.cat([lr, ref[:, None].expand(-1, T, -1, -1, -1)], dim=2)
            return self.encoder(x.reshape(B * T, 2 * C, h, w)).reshape(B, T, -1, h, w)
        return self.encoder(lr.reshape(B * T, C, h, w)).reshape(B, T, -1, h, w)

    def fuse(self, states, gaps, mask=None):
        """Returns (fused B x C_f x h x w, attention or None)."""
        kind = self.spec.kind
        if kind == "rrdb_sisr":
            if states.shape[1] != 1:
                raise UsageError("single-image model received more than one frame")
            return states[:, 0], None
        if kind == "highresnet_recursive":
            return self.fusion(pad_states(states, gaps, mask)), None
        pos = self.fusion.encode(gaps, mask)
        return self.fusion(states, pos, mask)

    def forward(self, lr, gaps, mask=None, return_attention: bool = False):
        fused, attn = self.fuse(self.encode_frames(lr, mask), gaps, mask)
        out = self.decoder(fused)
        return (out, attn) if return_attention else out

    def features(self, lr, gaps, mask=None):
        """Fused pre-decoder feature map (used as diffusion conditioning)."""
        return self.fuse(self.encode_frames(lr, mask), gaps, mask)[0]


def pad_states(states, gaps, mask=None):
    """Per-sample padding to a common power-of-two length with closest frames."""
    B, T = states.shape[:2]
    n_valid = [T] * B if mask is None else [int(m) for m in mask.sum(1)]
    target = max(next_power_of_two(n) for n in n_valid)
    rows = []
    for b in range(B):
        valid = list(range(T)) if mask is None else torch.nonzero(mask[b]).flatten().tolist()
        g = [int(gaps[b, k]) for k in valid]
        idx = [valid[i] for i in padding_indices(g, target)]
        rows.append(states[b, idx])
    return torch.stack(rows)


def build_model(spec: ModelSpec, seed: int = 0):
    """Instantiate the model for ``spec`` with seeded initial weights."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        if spec.is_diffusion:
            from .diffusion import SRDiff

            return SRDiff(spec)
        return SRModel(spec)
    finally:
        torch.random.set_rng_state(gen_state)


# -- single-series inference -----------------------------------------------------

def series_tensors(series: TimedSeries, dtype=torch.float32):
    lr = torch.from_numpy(series.stack()).to(dtype)[None]
    gaps = torch.from_numpy(series.gaps)[None]
    return lr, gaps


def closest_index(series: TimedSeries) -> int:
    from .datapipe import closest_frame

    return closest_frame(series)


def encode_frame(model: SRModel, lr: Raster, ref: Optional[Raster] = None) -> torch.Tensor:
    """Hidden state of one frame (HighRes-net needs ``ref``; RRDB must not get one)."""
    x = torch.tensor(np.asarray(lr.data))[None]
    enc = model.encoder
    if isinstance(enc, HighResNetEncoder):
        if ref is None:
            raise DomainError("HighRes-net encoder needs a reference image")
        if ref.shape != lr.shape:
            raise DomainError(f"frame {lr.shape} and reference {ref.shape} differ in shape")
        x = torch.cat([x, torch.tensor(np.asarray(ref.data))[None]], dim=1)
    elif ref is not None:
        raise DomainError("RRDB encoder takes no reference image")
    with torch.no_grad():
        return enc(x)[0]


def decode(model_or_decoder, fused) -> Raster:
    dec = model_or_decoder.decoder if hasattr(model_or_decoder, "decoder") else model_or_decoder
    x = torch.as_tensor(fused)
    if not torch.isfinite(x).all():
        raise DomainError("fused features contain non-finite values")
    with torch.no_grad():
        out = dec(x[None])[0]
    return Raster(out.numpy(), ValueRange.UNIT)


def super_resolve(model, series: TimedSeries, seed: Optional[int] = None,
                  return_attention: bool = False):
    """Full pipeline for one series. SISR kinds require exactly one frame."""
    spec = model.spec
    if spec.is_sisr and len(series) != 1:
        raise UsageError(f"{spec.kind} is single-image; select one frame (got T={len(series)})")
    lr, gaps = series_tensors(series)
    model.eval()
    with torch.no_grad():
        if spec.is_diffusion:
            out = model.sample(lr, gaps, seed=0 if seed is None else seed)
            attn = None
        else:
            out, attn = model(lr, gaps, return_attention=True)
    raster = Raster(out[0].numpy(), ValueRange.UNIT)
    if return_attention:
        return raster, (None if attn is None else attn[0].numpy())
    return raster
