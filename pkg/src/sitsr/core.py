"""Core data types: rasters, day-resolution timestamps, timed series and samples.

All containers are immutable after construction. Arrays handed in are copied
and flagged read-only so a sample can be shared between threads.
"""

from __future__ import annotations

import datetime as _dt
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPOCH = _dt.date(1970, 1, 1)
DEFAULT_SLACK_DAYS = 60


class SitsrError(Exception):
    """Base class of every error raised by this package."""


class DomainError(SitsrError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigError(SitsrError, ValueError):
    """Invalid or inconsistent configuration."""


class UsageError(SitsrError, ValueError):
    """Caller violated an API or CLI contract."""


class StateError(SitsrError, RuntimeError):
    """Object is not in a state that allows the requested operation."""


class TrainingError(SitsrError, RuntimeError):
    """Optimization failed (non-finite gradients, divergence)."""


class ParseError(SitsrError, ValueError):
    """Malformed file or document."""


class ValueRange(str, Enum):
    UNIT = "unit"
    BYTE = "byte_scale"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float32, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, order=True)
class Timestamp:
    """Whole days since 1970-01-01. Sub-day precision is rejected."""

    epoch_day: int

    def __post_init__(self):
        day = self.epoch_day
        if isinstance(day, bool):
            raise DomainError("timestamp must be an integer day count, got bool")
        if isinstance(day, (float, np.floating)):
            if not math.isfinite(day) or day != int(day):
                raise DomainError(f"sub-day timestamp rejected: {day!r}")
        elif not isinstance(day, (int, np.integer)):
            raise DomainError(f"timestamp must be an integer day count, got {type(day).__name__}")
        object.__setattr__(self, "epoch_day", int(day))

    @classmethod
    def from_date(cls, d: _dt.date | str) -> "Timestamp":
        if isinstance(d, str):
            try:
                d = _dt.date.fromisoformat(d) if len(d) == 10 else _dt.datetime.fromisoformat(d)
            except ValueError as exc:
                raise ParseError(f"not an ISO date: {d!r}") from exc
        if isinstance(d, _dt.datetime):
            if d.time() != _dt.time(0):
                raise DomainError(f"sub-day timestamp rejected: {d.isoformat()}")
            d = d.date()
        return cls((d - EPOCH).days)

    @classmethod
    def parse(cls, value) -> "Timestamp":
        """Accept a Timestamp, an integer epoch day or an ISO date string."""
        if isinstance(value, Timestamp):
            return value
        if isinstance(value, str):
            s = value.strip()
            if s.lstrip("+-").isdigit():
                return cls(int(s))
            return cls.from_date(s)
        if isinstance(value, _dt.date):
            return cls.from_date(value)
        return cls(value)

    def to_date(self) -> _dt.date:
        return EPOCH + _dt.timedelta(days=self.epoch_day)

    def __add__(self, days: int) -> "Timestamp":
        return Timestamp(self.epoch_day + int(days))

    def __sub__(self, other):
        if isinstance(other, Timestamp):
            return self.epoch_day - other.epoch_day
        return Timestamp(self.epoch_day - int(other))

    def __int__(self) -> int:
        return self.epoch_day

    def __str__(self) -> str:
        return self.to_date().isoformat()


@dataclass(frozen=True, eq=False)
class Raster:
    """C x H x W float32 image with its value-range tag and band labels."""

    data: np.ndarray
    value_range: ValueRange = ValueRange.UNIT
    channels: tuple = ("R", "G", "B")

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim == 2:
            data = _frozen(data[None])
        if data.ndim != 3:
            raise DomainError(f"raster must be C x H x W, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "value_range", ValueRange(self.value_range))
        chans = tuple(self.channels)
        if len(chans) != data.shape[0] and chans == ("R", "G", "B"):
            chans = tuple(f"B{i}" for i in range(data.shape[0]))
        object.__setattr__(self, "channels", chans)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def with_data(self, data: np.ndarray) -> "Raster":
        return Raster(data, self.value_range, self.channels)

    def to_byte_scale(self) -> np.ndarray:
        """Clip and rescale to 0-255 as float64 (no rounding)."""
        if self.value_range is ValueRange.BYTE:
            return np.clip(self.data.astype(np.float64), 0.0, 255.0)
        return np.clip(self.data.astype(np.float64), 0.0, 1.0) * 255.0


@dataclass(frozen=True, eq=False)
class TimedSeries:
    """Dated LR frames plus the reference date the output should depict.

    Frames need not be sorted or have unique dates.
    """

    frames: tuple
    t_ref: Timestamp
    slack: int = DEFAULT_SLACK_DAYS

    def __post_init__(self):
        frames = tuple((r, Timestamp.parse(t)) for r, t in self.frames)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "t_ref", Timestamp.parse(self.t_ref))

    @classmethod
    def from_arrays(cls, stack: np.ndarray, days: Iterable[int], t_ref, **kw) -> "TimedSeries":
        vr = kw.pop("value_range", ValueRange.UNIT)
        frames = tuple((Raster(x, vr), Timestamp(int(d))) for x, d in zip(stack, days))
        return cls(frames, Timestamp.parse(t_ref), **kw)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def rasters(self) -> list[Raster]:
        return [r for r, _ in self.frames]

    @property
    def timestamps(self) -> list[Timestamp]:
        return [t for _, t in self.frames]

    @property
    def days(self) -> np.ndarray:
        return np.array([t.epoch_day for _, t in self.frames], dtype=np.int64)

    @property
    def gaps(self) -> np.ndarray:
        """Signed day offsets t_k - t_ref."""
        return self.days - self.t_ref.epoch_day

    def stack(self) -> np.ndarray:
        return np.stack([r.data for r, _ in self.frames])

    def with_ref(self, t_ref) -> "TimedSeries":
        return TimedSeries(self.frames, Timestamp.parse(t_ref), self.slack)

    def subset(self, indices: Sequence[int]) -> "TimedSeries":
        return TimedSeries(tuple(self.frames[i] for i in indices), self.t_ref, self.slack)

    def shifted(self, days: int) -> "TimedSeries":
        frames = tuple((r, t + days) for r, t in self.frames)
        return TimedSeries(frames, self.t_ref + days, self.slack)

    def ref_in_span(self, t=None) -> bool:
        t = self.t_ref if t is None else Timestamp.parse(t)
        d = self.days
        return int(d.min()) - self.slack <= t.epoch_day <= int(d.max()) + self.slack

    def violations(self) -> list[str]:
        out = []
        if len(self.frames) == 0:
            return ["lr_series.frames: series must hold at least one frame"]
        first = self.frames[0][0]
        for k, (r, _) in enumerate(self.frames):
            if r.shape != first.shape:
                out.append(f"lr_series.frames[{k}]: shape {r.shape} differs from frame 0 {first.shape}")
            if r.value_range is not first.value_range:
                out.append(f"lr_series.frames[{k}]: value_range differs from frame 0")
            if not np.isfinite(r.data).all():
                out.append(f"lr_series.frames[{k}]: non-finite pixel values")
        if not self.ref_in_span():
            out.append(f"lr_series.t_ref: {self.t_ref} outside frame span +/- {self.slack} days")
        return out


@dataclass(frozen=True, eq=False)
class SRSample:
    """One supervised example. ``extras`` carries optional synthetic labels
    (true per-day dynamics field ``rate``, ``cloud_mask``)."""

    lr_series: TimedSeries
    hr: Raster
    block_id: int = 0
    scale: int = 4
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        extras = {}
        for k, v in dict(self.extras).items():
            a = np.array(v, copy=True)
            a.setflags(write=False)
            extras[k] = a
        object.__setattr__(self, "extras", extras)
        object.__setattr__(self, "block_id", int(self.block_id))
        object.__setattr__(self, "scale", int(self.scale))


def validate_sample(sample: SRSample) -> list[str]:
    """Report every broken invariant as ``"field: rule"``; never raises."""
    out: list[str] = []
    try:
        series = sample.lr_series
        out.extend(series.violations())
        hr = sample.hr
        if sample.scale < 1:
            out.append(f"scale: must be a positive integer, got {sample.scale}")
        if min(hr.shape) < 1:
            out.append(f"hr: empty dimension in shape {hr.shape}")
        if not np.isfinite(hr.data).all():
            out.append("hr: non-finite pixel values")
        if len(series.frames):
            c, h, w = series.frames[0][0].shape
            if min(c, h, w) < 1:
                out.append(f"lr_series.frames[0]: empty dimension in shape {(c, h, w)}")
            if hr.shape[1] != sample.scale * h or hr.shape[2] != sample.scale * w:
                out.append(
                    f"hr: spatial shape {hr.hw} != scale {sample.scale} x LR shape {(h, w)}"
                )
            if hr.shape[0] != c:
                out.append(f"hr: {hr.shape[0]} channels, LR has {c}")
    except Exception as exc:  # validation reports, it does not throw
        out.append(f"sample: unreadable ({exc})")
    return out


# -- serialization ----------------------------------------------------------

def write_npz(path: str | Path, arrays: dict) -> Path:
    """Uncompressed ``.npz`` with fixed zip timestamps, so equal arrays give equal bytes."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def save_sample(sample: SRSample, directory: str | Path) -> Path:
    """Write ``arrays.npz`` plus a ``meta.json`` sidecar into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"lr": sample.lr_series.stack(), "hr": sample.hr.data}
    arrays.update({f"extra_{k}": v for k, v in sample.extras.items()})
    write_npz(d / "arrays.npz", arrays)
    first = sample.lr_series.frames[0][0]
    meta = {
        "timestamps": [int(t) for t in sample.lr_series.days],
        "t_ref": sample.lr_series.t_ref.epoch_day,
        "block_id": sample.block_id,
        "scale": sample.scale,
        "slack": sample.lr_series.slack,
        "lr_value_range": first.value_range.value,
        "hr_value_range": sample.hr.value_range.value,
        "channels": list(first.channels),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    return d


def load_sample(directory: str | Path) -> SRSample:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        with np.load(d / "arrays.npz") as z:
            lr, hr = z["lr"], z["hr"]
            extras = {k[len("extra_"):]: z[k] for k in z.files if k.startswith("extra_")}
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read sample at {d}: {exc}") from exc
    chans = tuple(meta.get("channels", ("R", "G", "B")))
    frames = tuple(
        (Raster(x, meta.get("lr_value_range", "unit"), chans), Timestamp(t))
        for x, t in zip(lr, meta["timestamps"])
    )
    series = TimedSeries(frames, Timestamp(meta["t_ref"]), meta.get("slack", DEFAULT_SLACK_DAYS))
    hr_r = Raster(hr, meta.get("hr_value_range", "unit"), chans)
    return SRSample(series, hr_r, meta["block_id"], meta["scale"], extras)


def load_series(path: str | Path) -> TimedSeries:
    """Load the LR series of a sample directory (the HR part may be absent)."""
    d = Path(path)
    try:
        meta = json.loads((d / "meta.json").read_text())
        with np.load(d / "arrays.npz") as z:
            lr = z["lr"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read series at {d}: {exc}") from exc
    return TimedSeries.from_arrays(
        lr, meta["timestamps"], meta["t_ref"],
        slack=meta.get("slack", DEFAULT_SLACK_DAYS),
        value_range=meta.get("lr_value_range", "unit"),
    )


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    block_id: int
    t_ref: int
    timestamps: tuple
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    seed: int = 0
    ratios: tuple = ()

    def split_of(self, block_id: int) -> str:
        for r in self.records:
            if r.block_id == block_id:
                return r.split
        raise KeyError(block_id)

    def blocks(self, split: str) -> set[int]:
        return {r.block_id for r in self.records if r.split == split}

    def paths(self, split: str) -> list[str]:
        return [r.path for r in self.records if r.split == split]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratios": dict(self.ratios),
            "records": [
                {"path": r.path, "block_id": r.block_id, "t_ref": r.t_ref,
                 "timestamps": list(r.timestamps), "split": r.split}
                for r in self.records
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
            recs = tuple(
                ManifestRecord(r["path"], int(r["block_id"]), int(r["t_ref"]),
                               tuple(int(t) for t in r["timestamps"]), r["split"])
                for r in doc["records"]
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ParseError(f"malformed manifest: {exc}") from exc
        return cls(recs, doc.get("seed", 0), tuple(doc.get("ratios", {}).items()))
