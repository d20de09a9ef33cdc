"""L1 training with Adam, step learning-rate decay and resumable checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbones import ModelSpec, build_model
from .core import ConfigError, DomainError, SRSample, TrainingError
from .datapipe import closest_indices
from .fusion import padding_indices

log = logging.getLogger(__name__)


def l1_loss(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise DomainError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def lr_schedule(step: int, base: float, decay: float = 0.7, interval: int = 50_000) -> float:
    return base * decay ** (step // interval)


class Adam:
    """Bias-corrected Adam over named tensors.

    Kept in-house so that a non-finite gradient is reported with the name of
    the parameter it came from, and so the state serializes plainly.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float, grads: Optional[dict] = None):
        grads = grads or {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if g is not None and not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = torch.zeros_like(p)
            self.m[k].mul_(self.b1).add_(g, alpha=1 - self.b1)
            self.v[k].mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
            p.sub_(lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.clone() for k, v in self.m.items()},
                "v": {k: v.clone() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k].copy_(state["m"][k])
            self.v[k].copy_(state["v"][k])


def adam_step(params: dict, grads: dict, state: Optional[Adam], lr: float) -> Adam:
    """Functional form: apply one update to ``params`` in place, return the state."""
    state = state or Adam(params.items())
    state.step(lr, grads)
    return state


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    scale = max_norm / (float(total) + 1e-6)
    if scale < 1:
        for g in grads:
            g.mul_(scale)
    return float(total)


@dataclass
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    steps: int = 300_000
    batch_size: int = 32
    lr: float = 6e-4
    decay: float = 0.7
    decay_interval: int = 50_000
    seed: int = 0
    series_length: int = 8
    loss: str = "l1"
    val_interval: int = 1000
    val_samples: int = 512
    checkpoint_interval: int = 0  # 0: only at the end
    grad_clip: Optional[float] = None  # diffusion kinds default to 1.0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")
        if self.series_length < 1:
            raise ConfigError("series_length must be >= 1")
        if self.loss != "l1":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.grad_clip is None and self.model.is_diffusion:
            self.grad_clip = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def for_kind(cls, spec: ModelSpec, **overrides) -> "TrainConfig":
        """Reference per-family recipe. No diffusion lr is prescribed, so the RRDB value is reused."""
        kind = spec.kind
        if kind.startswith("highresnet"):
            base = dict(steps=300_000, batch_size=32, lr=6e-4)
        elif kind.startswith("rrdb"):
            base = dict(steps=300_000, batch_size=10, lr=2e-4)
        else:
            base = dict(steps=325_000 if kind == "srdiff_highresnet_ltae" else 400_000,
                        batch_size=64, lr=2e-4)
        base.update(overrides)
        return cls(model=spec, **base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# -- batching ------------------------------------------------------------------------

def select_frames(gaps: Sequence[int], spec: ModelSpec, T: int) -> tuple[list[int], int]:
    """Frame indices used for training and how many of them are real frames."""
    gaps = [int(g) for g in gaps]
    if spec.is_sisr:
        return closest_indices(gaps, 1), 1
    keep = closest_indices(gaps, T)
    if len(keep) < T and spec.kind == "highresnet_recursive":
        sub = [gaps[k] for k in keep]
        return [keep[i] for i in padding_indices(sub, T)], T
    return keep, len(keep)


@dataclass
class TensorSet:
    lr: torch.Tensor  # N x T x C x h x w
    gaps: torch.Tensor  # N x T
    mask: torch.Tensor  # N x T
    hr: torch.Tensor  # N x C x H x W

    def __len__(self):
        return self.lr.shape[0]

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx))
        mask = self.mask[idx]
        return self.lr[idx], self.gaps[idx], (None if bool(mask.all()) else mask), self.hr[idx]


def to_tensors(dataset: Sequence[SRSample], spec: ModelSpec, T: int) -> TensorSet:
    width = 1 if spec.is_sisr else T
    lrs, gaps, masks, hrs = [], [], [], []
    for s in dataset:
        g = s.lr_series.gaps
        idx, n_real = select_frames(g, spec, T)
        stack = s.lr_series.stack()[idx]
        gg = g[idx]
        pad = width - len(idx)
        if pad > 0:
            stack = np.concatenate([stack, np.zeros((pad,) + stack.shape[1:], stack.dtype)])
            gg = np.concatenate([gg, np.zeros(pad, np.int64)])
        m = np.zeros(width, bool)
        m[:n_real if pad > 0 else width] = True
        lrs.append(stack)
        gaps.append(gg)
        masks.append(m)
        hrs.append(s.hr.data)
    return TensorSet(torch.from_numpy(np.stack(lrs)), torch.from_numpy(np.stack(gaps)),
                     torch.from_numpy(np.stack(masks)), torch.from_numpy(np.stack(hrs)))


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_state: dict
    optim_state: dict
    config: dict
    step: int
    history: list = field(default_factory=list)  # [{"step", "val_mae"}]
    rng_state: dict = field(default_factory=dict)
    torch_rng: Optional[torch.Tensor] = None
    parameter_count: int = 0

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"config": self.config, "step": self.step, "history": self.history,
                "rng_state": self.rng_state, "parameter_count": self.parameter_count,
                "format": "sitsr-checkpoint-1"}
        torch.save({"meta": json.dumps(meta), "model": self.model_state,
                    "optim": self.optim_state, "torch_rng": self.torch_rng}, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from .core import ParseError, UsageError

        path = Path(path)
        if not path.exists():
            raise UsageError(f"checkpoint not found: {path}")
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
            meta = json.loads(blob["meta"])
        except Exception as exc:
            raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls(blob["model"], blob["optim"], meta["config"], meta["step"], meta["history"],
                   meta["rng_state"], blob.get("torch_rng"), meta.get("parameter_count", 0))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build(self):
        """Model with the checkpoint's weights, in eval mode."""
        model = build_model(self.train_config.model)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


class CSVSink:
    """Writes step, loss, lr, val_MAE rows."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["step", "loss", "lr", "val_MAE"])

    def __call__(self, row: dict):
        v = row.get("val_mae")
        self._w.writerow([row["step"], f"{row['loss']:.8g}", f"{row['lr']:.8g}", "" if v is None else f"{v:.8g}"])

    def close(self):
        self._fh.close()


# -- loop ----------------------------------------------------------------------------

def _forward_loss(model, spec, batch, gen):
    lr, gaps, mask, hr = batch
    if spec.is_diffusion:
        return model.loss(lr, gaps, hr, mask, gen)
    return l1_loss(model(lr, gaps, mask), hr)


@torch.no_grad()
def predict(model, tensors: TensorSet, batch_size: int = 16, seed: int = 0) -> torch.Tensor:
    model.eval()
    outs = []
    for start in range(0, len(tensors), batch_size):
        lr, gaps, mask, _ = tensors.batch(range(start, min(start + batch_size, len(tensors))))
        if getattr(model.spec, "is_diffusion", False):
            outs.append(model.sample(lr, gaps, mask, seed=seed + start))
        else:
            outs.append(model(lr, gaps, mask))
    return torch.cat(outs)


def byte_mae(pred: torch.Tensor, hr: torch.Tensor) -> float:
    return float((pred.clamp(0, 1).double() * 255 - hr.double() * 255).abs().mean())


def train(cfg: TrainConfig, dataset: Sequence[SRSample], sink: Optional[Callable] = None,
          val_dataset: Optional[Sequence[SRSample]] = None, resume: Optional[Checkpoint] = None,
          out_dir=None, tensors: Optional[TensorSet] = None,
          val_tensors: Optional[TensorSet] = None) -> Checkpoint:
    """Train ``cfg.model`` on ``dataset``; deterministic given ``cfg.seed``.

    ``resume`` continues from a checkpoint (its step counter, optimizer
    moments and RNG states). On a non-finite loss a ``TrainingError`` is
    raised whose ``checkpoint`` attribute holds the last finite state.
    """
    spec = cfg.model
    torch.manual_seed(cfg.seed)
    model = build_model(spec, seed=cfg.seed)
    for s in (dataset[0],) if len(dataset) else ():
        if s.scale != spec.scale:
            raise ConfigError(f"model scale {spec.scale} != data scale {s.scale}")
    data = tensors if tensors is not None else to_tensors(dataset, spec, cfg.series_length)
    if val_tensors is None and val_dataset is not None and len(val_dataset):
        vd = [val_dataset[i] for i in range(min(cfg.val_samples, len(val_dataset)))]
        val_tensors = to_tensors(vd, spec, cfg.series_length)
    opt = Adam(model.named_parameters())
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    step, history = 0, []
    if resume is not None:
        model.load_state_dict(resume.model_state)
        opt.load_state_dict(resume.optim_state)
        step, history = resume.step, list(resume.history)
        rng.bit_generator.state = resume.rng_state["numpy"]
        if resume.torch_rng is not None:
            gen.set_state(resume.torch_rng)

    def snapshot(at_step):
        return Checkpoint({k: v.clone() for k, v in model.state_dict().items()}, opt.state_dict(),
                          cfg.to_dict(), at_step, list(history), {"numpy": rng.bit_generator.state},
                          gen.get_state(), sum(p.numel() for p in model.parameters()))

    params = list(model.parameters())
    while step < cfg.steps:
        model.train()
        lr_now = lr_schedule(step, cfg.lr, cfg.decay, cfg.decay_interval)
        idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=len(data) < cfg.batch_size)
        loss = _forward_loss(model, spec, data.batch(idx), gen)
        if not torch.isfinite(loss):
            err = TrainingError(f"loss became non-finite at step {step}")
            # parameters are still those of the last finite update
            err.checkpoint = snapshot(step)
            if out_dir:
                err.checkpoint.save(Path(out_dir) / "checkpoints" / "last_finite.pt")
            raise err
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr_now)
        if spec.is_diffusion:
            model.trained.fill_(True)
        step += 1
        row = {"step": step, "loss": loss.item(), "lr": lr_now}
        if val_tensors is not None and cfg.val_interval and step % cfg.val_interval == 0:
            v = byte_mae(predict(model, val_tensors), val_tensors.hr)
            history.append({"step": step, "val_mae": v})
            row["val_mae"] = v
        if sink:
            sink(row)
        if out_dir and cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0:
            snapshot(step).save(Path(out_dir) / "checkpoints" / f"step_{step:07d}.pt")
    final = snapshot(step)
    if out_dir:
        final.save(Path(out_dir) / "checkpoints" / "final.pt")
    return final
