"""Image quality metrics on the 0-255 scale and the stratified evaluation harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import signal

from .core import ConfigError, DomainError, Raster, SRSample, TimedSeries
from .datapipe import closest_frame, closest_gap, keep_closest

GAP_BINS = ("<10", "10-30", ">30")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.to_byte_scale() if isinstance(a, Raster) else np.asarray(a, np.float64)
    b = b.to_byte_scale() if isinstance(b, Raster) else np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class ShiftMAEConfig:
    delta: int = 6

    def __post_init__(self):
        if self.delta < 0 or self.delta % 2:
            raise ConfigError(f"delta must be a non-negative even integer, got {self.delta}")

    @property
    def margin(self) -> int:
        return self.delta // 2


def shift_mae(sr, hr, cfg: ShiftMAEConfig = ShiftMAEConfig()) -> float:
    """Minimum MAE between the margin-cropped SR and HR windows at offsets (u, v) in {0..delta}^2.

    Offset (margin, margin) is the aligned position.
    """
    sr, hr = _pair(sr, hr)
    m, d = cfg.margin, cfg.delta
    H, W = sr.shape[-2:]
    if H < 2 * m + 1 or W < 2 * m + 1:
        raise DomainError(f"image {H}x{W} too small for delta={d}")
    center = sr[..., m:H - m, m:W - m]
    h, w = center.shape[-2:]
    best = math.inf
    for u in range(d + 1):
        for v in range(d + 1):
            best = min(best, float(np.mean(np.abs(hr[..., u:u + h, v:v + w] - center))))
    return best


def psnr(a, b) -> float:
    """10 log10(255^2 / MSE); +inf for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 255.0) -> float:
    """Mean SSIM over valid windows, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise DomainError(f"image smaller than the {win}x{win} SSIM window")
    w = gaussian_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for x, y in zip(a, b):
        f = lambda z: signal.convolve2d(z, w, mode="valid")
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx**2
        syy = f(y * y) - my**2
        sxy = f(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# -- perceptual proxy ----------------------------------------------------------------

class RandomConvPyramid(nn.Module):
    """Fixed random conv features at three scales. A deterministic stand-in
    for a learned perceptual network; values are not comparable to LPIPS."""

    def __init__(self, in_ch: int = 3, widths=(16, 32, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        prev = in_ch
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (prev * 9)))
                conv.bias.zero_()
            self.convs.append(conv)
            prev = w
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


_DEFAULT_EXTRACTOR: Optional[RandomConvPyramid] = None


def default_extractor() -> RandomConvPyramid:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = RandomConvPyramid()
    return _DEFAULT_EXTRACTOR


def perceptual_distance(a, b, extractor: Optional[Callable] = None) -> float:
    """Mean over scales of the mean squared distance of channel-normalized features.

    Inputs are scaled to [-1, 1] from the byte range before extraction.
    """
    a, b = _pair(a, b)
    extractor = extractor or default_extractor()
    ta = torch.from_numpy(a / 127.5 - 1.0).float()[None]
    tb = torch.from_numpy(b / 127.5 - 1.0).float()[None]
    with torch.no_grad():
        fa, fb = extractor(ta), extractor(tb)
    dists = []
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
        dists.append(float(((x - y) ** 2).sum(dim=1).mean()))
    return float(np.mean(dists))


# -- evaluation harness ----------------------------------------------------------------

def gap_bin(days: int) -> str:
    d = abs(int(days))
    if d < 10:
        return "<10"
    if d <= 30:
        return "10-30"
    return ">30"


METRIC_NAMES = ("mae", "shift_mae", "rmse", "psnr", "ssim", "perceptual")


def all_metrics(sr, hr, shift_cfg: ShiftMAEConfig = ShiftMAEConfig(), perceptual: bool = True) -> dict:
    out = {
        "mae": mae(sr, hr),
        "shift_mae": shift_mae(sr, hr, shift_cfg),
        "rmse": rmse(sr, hr),
        "psnr": psnr(sr, hr),
        "ssim": ssim(sr, hr),
    }
    if perceptual:
        out["perceptual"] = perceptual_distance(sr, hr)
    return out


@dataclass
class EvalConfig:
    series_length: Optional[int] = None  # keep the N frames closest to t_ref
    delta: int = 6
    perceptual: bool = True
    seed: int = 0


@dataclass
class MetricsReport:
    per_sample: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    strata: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list, meta: Optional[dict] = None) -> "MetricsReport":
        names = [k for k in METRIC_NAMES if rows and k in rows[0]]
        agg = {k: float(np.mean([r[k] for r in rows])) for k in names} if rows else {}
        strata = {}
        for b in GAP_BINS:
            sub = [r for r in rows if r["stratum"] == b]
            strata[b] = {"count": len(sub)}
            strata[b].update({k: float(np.mean([r[k] for r in sub])) for k in names} if sub else {})
        return cls(rows, agg, strata, dict(meta or {}))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["per_sample"], d["aggregates"], d["strata"], d.get("meta", {}))


def prepare_series(series: TimedSeries, is_sisr: bool, series_length: Optional[int]) -> TimedSeries:
    if is_sisr:
        return series.subset([closest_frame(series)])
    if series_length is not None:
        return keep_closest(series, series_length)
    return series


def evaluate(model, dataset: Sequence[SRSample], cfg: EvalConfig = EvalConfig(),
             progress: Optional[Callable] = None) -> MetricsReport:
    """Super-resolve each sample and score it against its HR target.

    ``model`` is an SR model (anything with ``.spec``) or a plain callable
    ``(sample) -> Raster``; callables receive the full sample.
    """
    from .backbones import super_resolve

    spec = getattr(model, "spec", None)
    shift_cfg = ShiftMAEConfig(cfg.delta)
    rows = []
    for i, sample in enumerate(dataset):
        if spec is not None and sample.scale != spec.scale:
            raise ConfigError(f"model scale {spec.scale} != dataset scale {sample.scale}")
        if spec is None:
            pred = model(sample)
        else:
            series = prepare_series(sample.lr_series, spec.is_sisr, cfg.series_length)
            pred = super_resolve(model, series, seed=cfg.seed + i)
        pred = pred if isinstance(pred, Raster) else Raster(np.asarray(pred))
        gap = closest_gap(sample.lr_series)
        row = {"index": i, "block_id": sample.block_id, "gap": gap, "stratum": gap_bin(gap)}
        row.update(all_metrics(pred, sample.hr, shift_cfg, cfg.perceptual))
        rows.append(row)
        if progress:
            progress(i)
    meta = {"series_length": cfg.series_length, "delta": cfg.delta}
    if spec is not None:
        meta["kind"] = spec.kind
    return MetricsReport.from_rows(rows, meta)
