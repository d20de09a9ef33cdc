"""Desk-scale experiments on synthetic data.

Trained checkpoints are cached on disk keyed by a hash of everything that
determines them, so the ordering, series-length, date and cloud studies
share one set of trained models.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbones import ModelSpec, build_model, super_resolve
from .core import SRSample, TimedSeries
from .datapipe import (
    DEFAULT_RATIOS,
    SynthConfig,
    _cloud_mask,
    closest_gap,
    keep_closest,
    split_indices,
    synth_generate,
)
from .encoding import EncodingConfig
from .fusion import FusionConfig
from .metrics import GAP_BINS, gap_bin
from .trainer import Checkpoint, TrainConfig, predict, to_tensors, train

log = logging.getLogger(__name__)

CACHE_VERSION = 1
ORDERING_KINDS = ("highresnet_recursive", "highresnet_ltae", "rrdb_sisr", "rrdb_ltae")
PAIRS = (("highresnet_ltae", "highresnet_recursive"), ("rrdb_ltae", "rrdb_sisr"))


def cache_dir() -> Path:
    return Path(os.environ.get("SITSR_CACHE", Path.home() / ".cache" / "sitsr"))


@dataclass
class DeskConfig:
    """Everything that determines the desk benchmark."""

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        n_samples=2000, lr_size=32, scale=4, series_min=8, series_max=12))
    series_length: int = 8
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-3
    decay: float = 0.7
    decay_interval: int = 2500
    base_channels: int = 16
    n_rrdb_blocks: int = 1
    seed: int = 0
    split_seed: int = 0

    def spec(self, kind: str) -> ModelSpec:
        return ModelSpec(kind=kind, scale=self.synth.scale, base_channels=self.base_channels,
                         n_rrdb_blocks=self.n_rrdb_blocks, fusion=FusionConfig(heads=4, d_k=8),
                         encoding=EncodingConfig(c_e=32, heads=4))

    def train_config(self, kind: str) -> TrainConfig:
        return TrainConfig(model=self.spec(kind), steps=self.steps, batch_size=self.batch_size,
                           lr=self.lr, decay=self.decay, decay_interval=self.decay_interval,
                           seed=self.seed, series_length=self.series_length, val_interval=0)

    def key(self, kind: str) -> str:
        blob = json.dumps({"v": CACHE_VERSION, "synth": self.synth.to_dict(),
                           "train": self.train_config(kind).to_dict(), "split_seed": self.split_seed},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class DeskData:
    """The synthetic dataset materialized once and split by block."""

    def __init__(self, cfg: DeskConfig):
        self.cfg = cfg
        self.dataset = synth_generate(cfg.synth)
        self.splits = split_indices(self.dataset, DEFAULT_RATIOS, cfg.split_seed)
        self._samples: dict = {}

    def samples(self, split: str) -> list[SRSample]:
        if split not in self._samples:
            self._samples[split] = [self.dataset[i] for i in self.splits[split]]
        return self._samples[split]


def trained_model(kind: str, cfg: DeskConfig, data: Optional[DeskData] = None,
                  use_cache: bool = True):
    """Train (or load from cache) ``kind`` on the desk training split."""
    path = cache_dir() / f"{kind}-{cfg.key(kind)}.pt"
    if use_cache and path.exists():
        return Checkpoint.load(path).build()
    data = data or DeskData(cfg)
    t0 = time.time()
    ck = train(cfg.train_config(kind), data.samples("train"))
    seconds = time.time() - t0
    log.info("trained %s in %.0fs", kind, seconds)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        ck.save(path)
        path.with_suffix(".json").write_text(json.dumps({"train_seconds": seconds}))
    return ck.build()


def training_seconds(kind: str, cfg: DeskConfig) -> Optional[float]:
    """Wall time recorded when the cached ``kind`` checkpoint was trained, if known."""
    meta = cache_dir() / f"{kind}-{cfg.key(kind)}.json"
    if not meta.exists():
        return None
    return float(json.loads(meta.read_text())["train_seconds"])


def per_sample_mae(pred: torch.Tensor, hr: torch.Tensor) -> np.ndarray:
    diff = pred.clamp(0, 1).double() * 255 - hr.double() * 255
    return diff.abs().mean(dim=(1, 2, 3)).numpy()


def stratified_mae(model, samples: Sequence[SRSample], series_length: int) -> dict:
    """Overall and per-gap-stratum byte-scale MAE."""
    tensors = to_tensors(samples, model.spec, series_length)
    errs = per_sample_mae(predict(model, tensors), tensors.hr)
    bins = np.array([gap_bin(closest_gap(s.lr_series)) for s in samples])
    out = {"all": float(errs.mean()), "count": {b: int((bins == b).sum()) for b in GAP_BINS}}
    for b in GAP_BINS:
        out[b] = float(errs[bins == b].mean()) if (bins == b).any() else float("nan")
    return out


def ordering_experiment(cfg: DeskConfig, kinds=ORDERING_KINDS, data: Optional[DeskData] = None) -> dict:
    data = data or DeskData(cfg)
    test = data.samples("test")
    res = {k: stratified_mae(trained_model(k, cfg, data), test, cfg.series_length) for k in kinds}
    adv = {}
    for a, b in PAIRS:
        if a in res and b in res:
            adv[f"{a}/{b}"] = {s: res[b][s] - res[a][s] for s in ("all",) + GAP_BINS}
    return {"mae": res, "advantage": adv}


def series_length_sweep(model, samples: Sequence[SRSample], lengths=(8, 4, 2)) -> dict:
    return {n: stratified_mae(model, samples, n)["all"] for n in lengths}


def date_correlation(model, samples: Sequence[SRSample], series_length: int = 8) -> dict:
    """Correlation between predicted and true HR changes between two target dates.

    The two dates are the earliest and latest kept acquisitions, where the
    true scene is known from the per-pixel drift ``rate``.
    """
    pred_d, true_d, per = [], [], []
    for s in samples:
        series = keep_closest(s.lr_series, series_length)
        days = series.days
        t1, t2 = int(days.min()), int(days.max())
        a = super_resolve(model, series.with_ref(t1)).data.astype(np.float64)
        b = super_resolve(model, series.with_ref(t2)).data.astype(np.float64)
        truth = s.extras["rate"].astype(np.float64) * (t2 - t1)
        pd, td = (b - a).ravel(), truth.ravel()
        pred_d.append(pd)
        true_d.append(td)
        if td.std() > 0 and pd.std() > 0:
            per.append(float(np.corrcoef(pd, td)[0, 1]))
    pooled = float(np.corrcoef(np.concatenate(pred_d), np.concatenate(true_d))[0, 1])
    return {"pooled": pooled, "mean_per_sample": float(np.mean(per)) if per else float("nan"),
            "n": len(samples)}


def clouded_samples(cfg: DeskConfig, n: int, seed_offset: int = 1000) -> list[tuple[SRSample, int]]:
    """Cloud-free scenes where exactly one of the kept frames gets a heavy cloud."""
    synth = dataclasses.replace(cfg.synth, n_samples=n, cloud_prob=0.0, seed=cfg.synth.seed + seed_offset)
    heavy = dataclasses.replace(synth, cloud_radius=(24.0, 40.0))
    rng = np.random.default_rng(cfg.synth.seed + seed_offset)
    out = []
    for s in synth_generate(synth):
        series = keep_closest(s.lr_series, cfg.series_length)
        stack = series.stack().astype(np.float64)
        k = int(rng.integers(len(series)))
        m = np.maximum(_cloud_mask(rng, heavy, *stack.shape[-2:]), 0.0)
        stack[k] = np.clip(stack[k] * (1 - m) + synth.cloud_level * m, 0, 1)
        new = TimedSeries.from_arrays(stack.astype(np.float32), series.days, series.t_ref)
        out.append((SRSample(new, s.hr, s.block_id, s.scale, {"cloud_frame": k, "cloud_cover": float(m.mean())}), k))
    return out


def cloud_attention(model, items: Sequence[tuple[SRSample, int]]) -> dict:
    """Mean attention (over heads and pixels) on the clouded frame vs 1/T."""
    w, uniform = [], []
    for s, k in items:
        _, attn = super_resolve(model, s.lr_series, return_attention=True)
        w.append(float(attn[:, k].mean()))
        uniform.append(1.0 / attn.shape[1])
    return {"clouded": float(np.mean(w)), "uniform": float(np.mean(uniform)), "n": len(items)}


def build_untrained(kind: str, cfg: DeskConfig):
    return build_model(cfg.spec(kind), cfg.seed)
