"""From raw rasters to model-ready samples, plus a synthetic paired-data generator."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .core import (
    ConfigError,
    DatasetManifest,
    DomainError,
    ManifestRecord,
    Raster,
    SRSample,
    TimedSeries,
    Timestamp,
    ValueRange,
    load_sample,
    save_sample,
)

# -- radiometric normalization -------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-source, per-channel (low, high) percentile estimates."""

    sources: dict = field(default_factory=dict)  # name -> {"low": [...], "high": [...]}

    def bounds(self, source: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            s = self.sources[source]
        except KeyError:
            raise ConfigError(f"no normalization stats for source {source!r}") from None
        return np.asarray(s["low"], np.float64), np.asarray(s["high"], np.float64)

    def to_json(self) -> str:
        return json.dumps(self.sources, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        return cls(json.loads(text))


def compute_norm_stats(rasters: Iterable[Raster], source: str, lo_pct: float = 2.0,
                       hi_pct: float = 98.0, max_pixels: int = 10_000_000, seed: int = 0,
                       into: Optional[NormStats] = None) -> NormStats:
    """Percentile bounds from a random subsample of at most ``max_pixels`` per channel.

    Pass only training-split rasters.
    """
    chunks = [np.asarray(r.data, np.float64).reshape(r.shape[0], -1) for r in rasters]
    if not chunks:
        raise DomainError("no rasters to compute statistics from")
    pix = np.concatenate(chunks, axis=1)
    if pix.shape[1] > max_pixels:
        rng = np.random.default_rng(seed)
        pix = pix[:, rng.choice(pix.shape[1], max_pixels, replace=False)]
    low = np.percentile(pix, lo_pct, axis=1)
    high = np.percentile(pix, hi_pct, axis=1)
    sources = dict(into.sources) if into else {}
    sources[source] = {"low": low.tolist(), "high": high.tolist()}
    return NormStats(sources)


def percentile_normalize(raster: Raster, stats_: NormStats, source: str) -> Raster:
    low, high = stats_.bounds(source)
    if np.any(high <= low):
        raise ConfigError(f"degenerate normalization stats for {source!r}: low >= high")
    x = (raster.data.astype(np.float64) - low[:, None, None]) / (high - low)[:, None, None]
    return Raster(np.clip(x, 0.0, 1.0).astype(np.float32), ValueRange.UNIT, raster.channels)


# -- histogram matching ----------------------------------------------------------


def match_channel(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Reference quantiles at the source's mid-rank empirical CDF positions."""
    s = np.asarray(source, np.float64).ravel()
    r = np.sort(np.asarray(reference, np.float64).ravel())
    if s.size == 0 or r.size == 0:
        raise DomainError("histogram matching of an empty raster")
    ranks = stats.rankdata(s, method="average") - 1.0
    q = ranks / (s.size - 1) if s.size > 1 else np.full_like(s, 0.5)
    out = np.interp(q * (r.size - 1), np.arange(r.size, dtype=np.float64), r)
    return out.reshape(np.shape(source))


def histogram_match(source: Raster, reference: Raster) -> Raster:
    if source.data.size == 0 or reference.data.size == 0:
        raise DomainError("histogram matching of an empty raster")
    if source.shape[0] != reference.shape[0]:
        raise DomainError(f"channel count differs: {source.shape[0]} vs {reference.shape[0]}")
    out = np.stack([match_channel(s, r) for s, r in zip(source.data, reference.data)])
    return Raster(out.astype(np.float32), reference.value_range, source.channels)


# -- temporal selection ------------------------------------------------------------


def closest_frame(series: TimedSeries) -> int:
    """argmin |t_k - t_ref|; ties go to the earlier date, then the lower index."""
    gaps = series.gaps
    return min(range(len(gaps)), key=lambda k: (abs(int(gaps[k])), int(gaps[k]), k))


def closest_indices(gaps: Sequence[int], n: int) -> list[int]:
    """Indices of the ``n`` frames nearest the reference, kept in original order."""
    order = sorted(range(len(gaps)), key=lambda k: (abs(int(gaps[k])), int(gaps[k]), k))
    return sorted(order[:n])


def keep_closest(series: TimedSeries, n: int) -> TimedSeries:
    if n >= len(series):
        return series
    return series.subset(closest_indices(series.gaps, n))


def closest_gap(series: TimedSeries) -> int:
    return int(abs(series.gaps[closest_frame(series)]))


# -- bicubic resampling -------------------------------------------------------------


def catmull_rom(x: np.ndarray) -> np.ndarray:
    a = -0.5
    x = np.abs(x)
    return np.where(
        x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """n_out x n_in interpolation matrix (pixel-centre aligned, edge replicate)."""
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    base = np.floor(src).astype(np.int64)
    m = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = base + tap
        w = catmull_rom(src - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return m


def output_size(n: int, factor) -> int:
    return max(1, int(math.floor(n * Fraction(factor) + Fraction(1, 2))))


def bicubic_resample(raster, factor) -> Raster | np.ndarray:
    """Catmull-Rom resampling; output dims are round(input x factor).

    Accepts a Raster or a bare (..., H, W) array and returns the same kind.
    """
    if not Fraction(factor) > 0:
        raise DomainError(f"resampling factor must be positive, got {factor}")
    data = raster.data if isinstance(raster, Raster) else np.asarray(raster)
    h, w = data.shape[-2:]
    mh = resample_matrix(h, output_size(h, factor))
    mw = resample_matrix(w, output_size(w, factor))
    out = mh @ data.astype(np.float64) @ mw.T
    if isinstance(raster, Raster):
        return Raster(out.astype(np.float32), raster.value_range, raster.channels)
    return out


# -- patching and splitting ------------------------------------------------------------


def make_patches(lr_scene: TimedSeries, hr_scene: Raster, lr_size: int = 74, hr_size: int = 296,
                 block_id: int = 0, hr_extras: Optional[Mapping] = None,
                 lr_extras: Optional[Mapping] = None) -> list[SRSample]:
    """Non-overlapping aligned (LR, HR) crops; border remainders are dropped.

    ``hr_extras`` arrays (..., H, W) are cut on the HR grid, ``lr_extras``
    arrays (..., h, w) on the LR grid.
    """
    if hr_size % lr_size:
        raise DomainError(f"hr_size {hr_size} is not a multiple of lr_size {lr_size}")
    scale = hr_size // lr_size
    h, w = lr_scene.frames[0][0].hw
    if hr_scene.hw != (scale * h, scale * w):
        raise DomainError(f"HR scene {hr_scene.hw} is not {scale} x LR scene {(h, w)}")
    stack = lr_scene.stack()
    out = []
    for i in range(h // lr_size):
        for j in range(w // lr_size):
            y, x = i * lr_size, j * lr_size
            Y, X = scale * y, scale * x
            lr = stack[:, :, y:y + lr_size, x:x + lr_size]
            frames = tuple((Raster(f, r.value_range, r.channels), t)
                           for f, (r, t) in zip(lr, lr_scene.frames))
            hr = Raster(hr_scene.data[:, Y:Y + hr_size, X:X + hr_size], hr_scene.value_range,
                        hr_scene.channels)
            extras = {k: np.asarray(v)[..., Y:Y + hr_size, X:X + hr_size] for k, v in (hr_extras or {}).items()}
            extras.update({k: np.asarray(v)[..., y:y + lr_size, x:x + lr_size] for k, v in (lr_extras or {}).items()})
            extras["offset"] = np.array([y, x], dtype=np.int64)
            out.append(SRSample(TimedSeries(frames, lr_scene.t_ref, lr_scene.slack), hr,
                                block_id, scale, extras))
    return out


DEFAULT_RATIOS = {"train": 0.63, "val": 0.07, "test": 0.30}


def _split_counts(n: int, ratios: Mapping[str, float]) -> dict:
    names = list(ratios)
    raw = {k: n * ratios[k] for k in names}
    counts = {k: int(math.floor(raw[k])) for k in names}
    for k in sorted(names, key=lambda k: (-(raw[k] - counts[k]), names.index(k)))[: n - sum(counts.values())]:
        counts[k] += 1
    # every split with a positive ratio gets at least one block
    for k in names:
        if ratios[k] > 0 and counts[k] == 0:
            donor = max(names, key=lambda j: counts[j])
            counts[donor] -= 1
            counts[k] += 1
    return counts


def block_split(tiles: Iterable, ratios: Mapping[str, float] = DEFAULT_RATIOS,
                seed: int = 0) -> DatasetManifest:
    """Assign whole geographic blocks to splits.

    ``tiles`` yields (path, block_id, t_ref, timestamps) tuples or mappings
    with those keys. Blocks are shuffled with ``seed`` and cut by
    largest-remainder rounding of ``ratios``.
    """
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios.values())}")
    items = []
    for t in tiles:
        if isinstance(t, Mapping):
            t = (t["path"], t["block_id"], t.get("t_ref", 0), t.get("timestamps", ()))
        items.append((str(t[0]), int(t[1]), int(t[2]), tuple(int(d) for d in t[3])))
    blocks = sorted({b for _, b, _, _ in items})
    n_active = sum(1 for v in ratios.values() if v > 0)
    if len(blocks) < n_active:
        raise DomainError(f"{len(blocks)} blocks cannot fill {n_active} splits")
    perm = np.random.default_rng(seed).permutation(len(blocks))
    counts = _split_counts(len(blocks), ratios)
    assignment, pos = {}, 0
    for name in ratios:
        for k in perm[pos:pos + counts[name]]:
            assignment[blocks[k]] = name
        pos += counts[name]
    records = tuple(ManifestRecord(p, b, tr, ts, assignment[b]) for p, b, tr, ts in items)
    return DatasetManifest(records, seed, tuple(ratios.items()))


# -- synthetic generator -------------------------------------------------------------

PALETTE = np.array([
    [0.22, 0.38, 0.16],  # grassland
    [0.15, 0.30, 0.12],  # forest
    [0.52, 0.42, 0.30],  # bare soil
    [0.62, 0.55, 0.38],  # dry crop
    [0.35, 0.45, 0.22],  # young crop
    [0.55, 0.52, 0.50],  # built-up
])
GREENING = np.array([-0.45, 1.0, -0.35])


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 64
    lr_size: int = 32
    scale: int = 4
    block_size: int = 2  # patches per side of one geographic block
    series_min: int = 8
    series_max: int = 26
    revisit_days: int = 5
    skip_prob: float = 0.45  # chance each revisit is lost (clouds, orbit)
    ref_outside_prob: float = 0.3
    ref_outside_max: int = 50
    blur_sigma: float = 1.6  # HR pixels
    noise_sigma: float = 0.01
    gain_jitter: float = 0.08
    bias_jitter: float = 0.03
    cloud_prob: float = 0.15
    cloud_radius: tuple = (4.0, 12.0)  # LR pixels
    cloud_level: float = 0.95
    dynamics_rate: float = 0.004  # max per-day reflectance drift
    dynamic_fraction: float = 0.6
    parcels_per_patch: int = 5
    texture_amp: float = 0.05
    roads_per_patch: float = 0.6
    base_day: int = 17622  # 2018-04-01
    seed: int = 0

    def __post_init__(self):
        for name in ("skip_prob", "ref_outside_prob", "cloud_prob", "dynamic_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if self.series_min < 1 or self.series_max < self.series_min:
            raise ConfigError("need 1 <= series_min <= series_max")
        if self.scale < 1 or self.lr_size < 1 or self.block_size < 1:
            raise ConfigError("sizes must be positive")
        object.__setattr__(self, "cloud_radius", tuple(self.cloud_radius))

    @property
    def patches_per_block(self) -> int:
        return self.block_size**2

    @property
    def n_blocks(self) -> int:
        return -(-self.n_samples // self.patches_per_block)

    def to_dict(self) -> dict:
        return asdict(self)


def _acquisition_offsets(rng, cfg: SynthConfig) -> tuple[np.ndarray, int]:
    """Irregular dates (days relative to the first frame) and the reference offset."""
    T = int(rng.integers(cfg.series_min, cfg.series_max + 1))
    gaps = []
    while len(gaps) < T - 1:
        g = cfg.revisit_days
        while rng.random() < cfg.skip_prob:
            g += cfg.revisit_days
        gaps.append(g + int(rng.integers(-1, 2)) if g > 1 else g)
    days = np.concatenate([[0], np.cumsum(gaps)]).astype(np.int64)
    if rng.random() < cfg.ref_outside_prob:
        d = int(rng.integers(1, cfg.ref_outside_max + 1))
        t_ref = -d if rng.random() < 0.5 else int(days[-1]) + d
    else:
        t_ref = int(rng.integers(0, int(days[-1]) + 1))
    return rng.permutation(days), t_ref


def _render_base(rng, cfg: SynthConfig, n: int, n_parcels: int):
    """Parcel map, base reflectance and per-day dynamics field on an n x n HR grid."""
    seeds = rng.uniform(0, n, size=(n_parcels, 2))
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    # anisotropic distance gives elongated, field-like parcels
    stretch = rng.uniform(0.5, 2.0, size=n_parcels)
    d = ((yy[..., None] - seeds[:, 0]) ** 2 * stretch + (xx[..., None] - seeds[:, 1]) ** 2 / stretch)
    labels = np.argmin(d, axis=-1)
    colors = PALETTE[rng.integers(0, len(PALETTE), n_parcels)] + rng.normal(0, 0.04, (n_parcels, 3))
    base = colors[labels].transpose(2, 0, 1)
    tex = ndimage.gaussian_filter(rng.normal(size=(3, n, n)), sigma=(0, 3, 3))
    tex = tex / (tex.std() + 1e-12)
    base = base + cfg.texture_amp * (0.7 * tex + 0.3 * tex.mean(0, keepdims=True))
    n_roads = rng.poisson(cfg.roads_per_patch * cfg.patches_per_block)
    for _ in range(n_roads):
        p = rng.uniform(0, n, 2)
        ang = rng.uniform(0, np.pi)
        dist = np.abs((yy - p[0]) * np.cos(ang) - (xx - p[1]) * np.sin(ang))
        road = np.clip(1.5 - dist, 0, 1)
        base = base * (1 - road) + 0.68 * road
    base = np.clip(base, 0.05, 0.95)
    dynamic = rng.random(n_parcels) < cfg.dynamic_fraction
    strength = rng.uniform(0.3, 1.0, n_parcels) * np.where(rng.random(n_parcels) < 0.7, 1.0, -1.0)
    rate_p = (dynamic * strength)[:, None] * GREENING[None] * cfg.dynamics_rate
    rate = rate_p[labels].transpose(2, 0, 1)
    return base, rate, labels


def _cloud_mask(rng, cfg: SynthConfig, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    mask = np.zeros((h, w))
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(*cfg.cloud_radius, size=2)
        ang = rng.uniform(0, np.pi)
        u = ((yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)) / ry
        v = (-(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)) / rx
        r = np.sqrt(u**2 + v**2)
        mask = np.maximum(mask, np.clip((1.2 - r) / 0.4, 0.0, 1.0))
    return mask


def degrade(hr: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Sensor model without radiometric jitter: Gaussian blur then bicubic downsample."""
    blurred = ndimage.gaussian_filter(hr, sigma=(0, cfg.blur_sigma, cfg.blur_sigma), mode="reflect") \
        if cfg.blur_sigma > 0 else hr
    return bicubic_resample(blurred, Fraction(1, cfg.scale))


def _scene(cfg: SynthConfig, block: int):
    """Dates, base reflectance at t_ref and drift field of one block, plus the live rng."""
    rng = np.random.default_rng([cfg.seed, block])
    offsets, ref_off = _acquisition_offsets(rng, cfg)
    start = cfg.base_day + int(rng.integers(0, 30))
    days, t_ref = offsets + start, start + ref_off
    n_hr = cfg.lr_size * cfg.block_size * cfg.scale
    base, rate, _ = _render_base(rng, cfg, n_hr, cfg.parcels_per_patch * cfg.patches_per_block)
    # bound the drift so every render over the series stays inside [0, 1]
    rel = (days - t_ref).astype(np.float64)
    lo_t, hi_t = min(rel.min(), 0.0), max(rel.max(), 0.0)
    ext_hi = np.maximum(rate * hi_t, rate * lo_t)
    ext_lo = np.minimum(rate * hi_t, rate * lo_t)
    room = np.minimum(np.where(ext_hi > 0, (1.0 - base) / np.maximum(ext_hi, 1e-12), np.inf),
                      np.where(ext_lo < 0, base / np.maximum(-ext_lo, 1e-12), np.inf))
    rate = rate * min(1.0, float(room.min()))
    return rng, days, t_ref, base, rate


def render_hr(cfg: SynthConfig, block: int, day: int) -> list[np.ndarray]:
    """HR patches of ``block`` rendered at ``day`` (same patch order as the samples)."""
    _, _, t_ref, base, rate = _scene(cfg, block)
    scene = base + rate * float(day - t_ref)
    n = cfg.lr_size * cfg.scale
    return [scene[:, i * n:(i + 1) * n, j * n:(j + 1) * n]
            for i in range(cfg.block_size) for j in range(cfg.block_size)]


def synth_block(cfg: SynthConfig, block: int) -> list[SRSample]:
    """All samples of one geographic block (deterministic in ``(seed, block)``)."""
    rng, days, t_ref, base, rate = _scene(cfg, block)
    hr = base  # scene at t_ref
    frames = []
    for d in days:
        scene = base + rate * float(d - t_ref)
        lr = degrade(scene, cfg)
        gain = 1.0 + rng.uniform(-cfg.gain_jitter, cfg.gain_jitter) + rng.normal(0, cfg.gain_jitter / 4, (3, 1, 1))
        bias = rng.uniform(-cfg.bias_jitter, cfg.bias_jitter)
        lr = gain * lr + bias
        if cfg.noise_sigma > 0:
            lr = lr + rng.normal(0, cfg.noise_sigma, lr.shape)
        frames.append((Raster(lr.astype(np.float32)), Timestamp(int(d))))
    scene_series = TimedSeries(tuple(frames), Timestamp(int(t_ref)))
    hr_r = Raster(hr.astype(np.float32))
    patches = make_patches(scene_series, hr_r, cfg.lr_size, cfg.lr_size * cfg.scale, block,
                           hr_extras={"rate": rate.astype(np.float32)})
    out = []
    for p in patches:
        stack = p.lr_series.stack().astype(np.float64)
        masks = np.zeros((len(stack),) + stack.shape[-2:], dtype=np.float32)
        for k in range(len(stack)):
            if rng.random() < cfg.cloud_prob:
                m = _cloud_mask(rng, cfg, *stack.shape[-2:])
                stack[k] = stack[k] * (1 - m) + cfg.cloud_level * m
                masks[k] = m
        stack = np.clip(stack, 0.0, 1.0)
        series = TimedSeries.from_arrays(stack.astype(np.float32), p.lr_series.days, p.lr_series.t_ref)
        extras = dict(p.extras)
        extras["cloud_mask"] = masks
        out.append(SRSample(series, p.hr, block, cfg.scale, extras))
    return out


class SynthDataset(Sequence):
    """Lazy, deterministic sequence of synthetic samples (block-major order)."""

    def __init__(self, cfg: SynthConfig, cache_blocks: int = 4):
        self.cfg = cfg
        self._cache: OrderedDict = OrderedDict()
        self._cache_blocks = cache_blocks

    def __len__(self) -> int:
        return self.cfg.n_samples

    def block(self, b: int) -> list[SRSample]:
        if b in self._cache:
            self._cache.move_to_end(b)
            return self._cache[b]
        samples = synth_block(self.cfg, b)
        self._cache[b] = samples
        if len(self._cache) > self._cache_blocks:
            self._cache.popitem(last=False)
        return samples

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        ppb = self.cfg.patches_per_block
        return self.block(i // ppb)[i % ppb]

    def block_ids(self) -> list[int]:
        ppb = self.cfg.patches_per_block
        return [i // ppb for i in range(len(self))]


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    return SynthDataset(cfg)


# -- dataset directories -------------------------------------------------------------


def write_dataset(dataset: Sequence[SRSample], out_dir, ratios: Mapping[str, float] = DEFAULT_RATIOS,
                  seed: int = 0, extra_meta: Optional[dict] = None) -> DatasetManifest:
    """Write samples, ``manifest.json`` and ``norm_stats.json`` (training split only)."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    tiles = []
    for i, s in enumerate(dataset):
        rel = f"samples/{i:06d}"
        save_sample(s, out / rel)
        tiles.append((rel, s.block_id, s.lr_series.t_ref.epoch_day, tuple(int(d) for d in s.lr_series.days)))
    manifest = block_split(tiles, ratios, seed)
    (out / "manifest.json").write_text(manifest.to_json())
    train_paths = set(manifest.paths("train"))
    train = [load_sample(out / p) for p in sorted(train_paths)]
    ns = compute_norm_stats((r for s in train for r in s.lr_series.rasters), "lr", seed=seed)
    ns = compute_norm_stats((s.hr for s in train), "hr", seed=seed, into=ns)
    (out / "norm_stats.json").write_text(ns.to_json())
    if extra_meta:
        (out / "dataset.json").write_text(json.dumps(extra_meta, indent=2))
    return manifest


class DiskDataset(Sequence):
    """Samples of one split of a dataset directory, read on access."""

    def __init__(self, root, split: Optional[str] = None):
        self.root = Path(root)
        try:
            self.manifest = DatasetManifest.from_json((self.root / "manifest.json").read_text())
        except OSError as exc:
            from .core import ParseError

            raise ParseError(f"no manifest in {self.root}: {exc}") from exc
        self.records = [r for r in self.manifest.records if split is None or r.split == split]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return load_sample(self.root / self.records[i].path)


def split_indices(dataset: Sequence[SRSample], ratios: Mapping[str, float] = DEFAULT_RATIOS,
                  seed: int = 0) -> dict:
    """In-memory block split: split name -> sample indices."""
    ids = dataset.block_ids() if hasattr(dataset, "block_ids") else [s.block_id for s in dataset]
    manifest = block_split(((str(i), b, 0, ()) for i, b in enumerate(ids)), ratios, seed)
    out = {k: [] for k in ratios}
    for r in manifest.records:
        out[r.split].append(int(r.path))
    return out
