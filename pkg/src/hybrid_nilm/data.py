"""REFIT ingestion, normalization, windowing, stitching and synthetic households."""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REFIT_HEADER = ["Time", "Unix", "Aggregate"] + [f"Appliance{i}" for i in range(1, 10)]
REFIT_SPACING = 8.0
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed input data or an impossible windowing request."""


@dataclass
class TimeSeries:
    timestamps: np.ndarray  # int64 unix seconds
    values: np.ndarray  # float64 watts
    label: str = ""
    drop_count: int = 0
    nominal_spacing: float = REFIT_SPACING
    gap_before: np.ndarray | None = None  # gap_before[i]: jump from i-1 to i is a gap

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape:
            raise DataError(
                f"timestamps ({self.timestamps.size}) and values ({self.values.size}) differ in length"
            )
        if self.gap_before is None:
            self.gap_before = flag_gaps(self.timestamps, self.nominal_spacing)

    def __len__(self) -> int:
        return self.values.size

    def slice(self, start: int, stop: int) -> "TimeSeries":
        gaps = self.gap_before[start:stop].copy()
        if gaps.size:
            gaps[0] = False
        return TimeSeries(self.timestamps[start:stop], self.values[start:stop], self.label,
                          0, self.nominal_spacing, gaps)

    @property
    def spacing(self) -> float:
        """Median observed sample spacing in seconds."""
        if len(self) < 2:
            return float("nan")
        return float(np.median(np.diff(self.timestamps)))

    @property
    def gap_indices(self) -> np.ndarray:
        return np.flatnonzero(self.gap_before)


def flag_gaps(timestamps: np.ndarray, nominal_spacing: float = REFIT_SPACING) -> np.ndarray:
    """True at i when ``t[i] - t[i-1]`` exceeds twice the nominal spacing."""
    gaps = np.zeros(len(timestamps), dtype=bool)
    if len(timestamps) > 1:
        gaps[1:] = np.diff(timestamps) > 2.0 * nominal_spacing
    return gaps


# ---------------------------------------------------------------- CSV I/O


def _parse_number(text: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_refit_csv(path, appliance_column: int, label: str | None = None,
                   nominal_spacing: float = REFIT_SPACING) -> tuple[TimeSeries, TimeSeries]:
    """Read a REFIT house CSV and return aligned (aggregate, appliance) series.

    Rows where the timestamp, the aggregate or the chosen appliance cell is
    missing or unparseable are dropped; the count is stored on both series as
    ``drop_count``.  Negative readings are clamped to 0 W.
    """
    if not 1 <= appliance_column <= 9:
        raise DataError(f"appliance_column must be in 1..9, got {appliance_column}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"REFIT file not found: {path}")
    col = 2 + appliance_column
    ts, agg, app = [], [], []
    dropped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != REFIT_HEADER:
            raise DataError(f"{path}: header {header} does not match REFIT layout {REFIT_HEADER}")
        for row in reader:
            if not row:
                continue
            if len(row) < len(REFIT_HEADER):
                dropped += 1
                continue
            u, a, p = _parse_number(row[1]), _parse_number(row[2]), _parse_number(row[col])
            if u is None or a is None or p is None:
                dropped += 1
                continue
            ts.append(int(u))
            agg.append(max(a, 0.0))
            app.append(max(p, 0.0))
    if not ts:
        raise DataError(f"{path}: no usable rows")
    t = np.asarray(ts, dtype=np.int64)
    if np.any(np.diff(t) < 0):
        raise DataError(f"{path}: Unix timestamps are not monotone")
    name = label or f"appliance{appliance_column}"
    return (TimeSeries(t, agg, "aggregate", dropped, nominal_spacing),
            TimeSeries(t, app, name, dropped, nominal_spacing))


def load_series_csv(path, label: str = "", nominal_spacing: float = REFIT_SPACING) -> TimeSeries:
    """Read a two-column ``unix_seconds,watts`` CSV, or the Aggregate column
    of a REFIT-layout file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"series file not found: {path}")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is not None and [h.strip() for h in header] == REFIT_HEADER:
        agg, _ = load_refit_csv(path, 1, nominal_spacing=nominal_spacing)
        agg.label = label or "aggregate"
        return agg
    ts, vals, dropped = [], [], 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["unix_seconds", "watts"]:
            raise DataError(f"{path}: expected header unix_seconds,watts, got {header}")
        for row in reader:
            if not row:
                continue
            u = _parse_number(row[0]) if len(row) > 0 else None
            w = _parse_number(row[1]) if len(row) > 1 else None
            if u is None or w is None:
                dropped += 1
                continue
            ts.append(int(u))
            vals.append(w)
    if not ts:
        raise DataError(f"{path}: no usable rows")
    return TimeSeries(ts, vals, label, dropped, nominal_spacing)


def format_watts(v: float) -> str:
    v = float(v)
    if v.is_integer():
        return str(int(v))
    return repr(v)


def write_series_csv(series: TimeSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unix_seconds", "watts"])
        for t, v in zip(series.timestamps.tolist(), series.values.tolist()):
            w.writerow([t, format_watts(v)])


def series_to_json(series: TimeSeries) -> dict:
    return {
        "label": series.label,
        "unix_seconds": series.timestamps.tolist(),
        "watts": series.values.tolist(),
    }


def write_refit_csv(aggregate: TimeSeries, appliances: list[TimeSeries], path) -> None:
    """Write series in REFIT layout; unused appliance columns are 0 W."""
    if len(appliances) > 9:
        raise DataError("REFIT layout holds at most 9 appliances")
    n = len(aggregate)
    cols = [a.values for a in appliances] + [np.zeros(n)] * (9 - len(appliances))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REFIT_HEADER)
        for k in range(n):
            t = int(aggregate.timestamps[k])
            stamp = _dt.datetime.fromtimestamp(t, tz=_dt.timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
            w.writerow([stamp, t, int(round(aggregate.values[k]))]
                       + [int(round(c[k])) for c in cols])


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std >= STD_FLOOR:
            raise DataError(f"std must be >= {STD_FLOOR}, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(float(d["mean"]), float(d["std"]))


def compute_norm_stats(series, start: int = 0, stop: int | None = None) -> NormStats:
    """Mean and population std over ``values[start:stop]``; std floored at 1e-8."""
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    chunk = values[start:stop]
    if chunk.size == 0:
        raise DataError("cannot compute normalization stats over an empty range")
    mean = float(chunk.mean())
    std = float(chunk.std())
    return NormStats(mean, max(std, STD_FLOOR))


def normalize(dp, stats: NormStats):
    """``(dp - mean) / std``; scalars in, scalars out."""
    z = (np.asarray(dp, dtype=float) - stats.mean) / stats.std
    return float(z) if z.ndim == 0 else z


def denormalize(z, stats: NormStats):
    dp = np.asarray(z, dtype=float) * stats.std + stats.mean
    return float(dp) if dp.ndim == 0 else dp


# ---------------------------------------------------------------- windowing


@dataclass
class WindowedDataset:
    inputs: np.ndarray  # [N, W] normalized mains
    targets: np.ndarray  # [N, W] normalized appliance
    input_stats: NormStats
    target_stats: NormStats
    window_len: int
    stride: int
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source_len: int = 0
    excluded_gap_windows: int = 0

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise DataError(f"inputs {self.inputs.shape} and targets {self.targets.shape} differ")
        if self.inputs.ndim != 2 or self.inputs.shape[1] != self.window_len:
            raise DataError(f"windows must be [N, {self.window_len}], got {self.inputs.shape}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.input_stats,
                               self.target_stats, self.window_len, self.stride,
                               self.starts[idx], self.source_len)


def window_count(length: int, window_len: int, stride: int) -> int:
    if length < window_len:
        return 0
    return (length - window_len) // stride + 1


def window_starts(length: int, window_len: int, stride: int, cover_tail: bool = False) -> np.ndarray:
    n = window_count(length, window_len, stride)
    starts = np.arange(n, dtype=np.int64) * stride
    if cover_tail and n and starts[-1] + window_len < length:
        starts = np.append(starts, length - window_len)
    return starts


def make_windows(mains: TimeSeries, appliance: TimeSeries, window_len: int, stride: int = 1,
                 input_stats: NormStats | None = None, target_stats: NormStats | None = None,
                 exclude_gaps: bool = True) -> WindowedDataset:
    """Slice aligned series into ``floor((len - W) / stride) + 1`` window pairs.

    Stats default to the series' own; pass the training-split stats when
    windowing a test split.  Windows straddling a flagged timestamp gap are
    dropped when ``exclude_gaps`` is set.
    """
    if len(mains) != len(appliance) or not np.array_equal(mains.timestamps, appliance.timestamps):
        raise DataError("mains and appliance series are not time-aligned")
    if window_len < 1 or stride < 1:
        raise DataError("window_len and stride must be >= 1")
    n = len(mains)
    if n < window_len:
        raise DataError(f"series length {n} is shorter than the window ({window_len})")
    input_stats = input_stats or compute_norm_stats(mains)
    target_stats = target_stats or compute_norm_stats(appliance)
    starts = window_starts(n, window_len, stride)
    excluded = 0
    if exclude_gaps and mains.gap_before.any():
        # a window [s, s+W) is broken if any gap_before[s+1 .. s+W-1] is set
        csum = np.concatenate([[0], np.cumsum(mains.gap_before)])
        broken = (csum[starts + window_len] - csum[starts + 1]) > 0
        excluded = int(broken.sum())
        starts = starts[~broken]
    idx = starts[:, None] + np.arange(window_len)[None, :]
    x = normalize(mains.values, input_stats)[idx] if starts.size else np.zeros((0, window_len))
    y = normalize(appliance.values, target_stats)[idx] if starts.size else np.zeros((0, window_len))
    return WindowedDataset(x, y, input_stats, target_stats, window_len, stride, starts, n, excluded)


def split_index(length: int, train_fraction: float = 0.7) -> int:
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    cut = int(math.floor(train_fraction * length))
    if cut < 1 or cut >= length:
        raise DataError(f"split of {length} samples at {train_fraction} leaves one side empty")
    return cut


def split_train_test(obj, train_fraction: float = 0.7):
    """Chronological prefix/suffix split at ``floor(fraction * len)``.

    Works on a ``TimeSeries`` or a ``WindowedDataset`` (split by window
    order).  No shuffling.
    """
    n = len(obj)
    cut = split_index(n, train_fraction)
    if isinstance(obj, TimeSeries):
        return obj.slice(0, cut), obj.slice(cut, n)
    if isinstance(obj, WindowedDataset):
        return obj.subset(slice(0, cut)), obj.subset(slice(cut, n))
    raise TypeError(f"cannot split {type(obj).__name__}")


@dataclass
class PreparedSplit:
    train: WindowedDataset
    test: WindowedDataset
    train_mains: TimeSeries
    train_target: TimeSeries
    test_mains: TimeSeries
    test_target: TimeSeries
    split_at: int


def prepare_split(mains: TimeSeries, appliance: TimeSeries, window_len: int,
                  train_fraction: float = 0.7, train_stride: int = 1,
                  test_stride: int | None = None) -> PreparedSplit:
    """Split series chronologically, fit stats on the training prefix only and
    window both halves with those stats."""
    tr_m, te_m = split_train_test(mains, train_fraction)
    tr_a, te_a = split_train_test(appliance, train_fraction)
    in_stats = compute_norm_stats(tr_m)
    tgt_stats = compute_norm_stats(tr_a)
    train = make_windows(tr_m, tr_a, window_len, train_stride, in_stats, tgt_stats)
    test = make_windows(te_m, te_a, window_len, test_stride or window_len, in_stats, tgt_stats)
    return PreparedSplit(train, test, tr_m, tr_a, te_m, te_a, len(tr_m))


# ---------------------------------------------------------------- stitching


def stitch_predictions(window_preds, stride: int, total_len: int, stats: NormStats | None = None,
                       starts=None, clamp: bool = True) -> np.ndarray:
    """Average overlapping window predictions back into one series.

    Positions no window covers are NaN.  With ``stats`` the result is
    denormalized to watts; negative watts are then clamped to 0.
    """
    preds = np.asarray(window_preds, dtype=float)
    if preds.ndim != 2:
        raise DataError(f"window predictions must be [N, W], got {preds.shape}")
    N, W = preds.shape
    if starts is None:
        if stride < 1:
            raise DataError("stride must be >= 1")
        covered = N * stride + W - stride
        if N and covered > total_len:
            raise DataError(
                f"{N} windows of {W} at stride {stride} cover {covered} samples > total {total_len}"
            )
        starts = np.arange(N, dtype=np.int64) * stride
    else:
        starts = np.asarray(starts, dtype=np.int64)
        if starts.shape != (N,) or (N and (starts.min() < 0 or starts.max() + W > total_len)):
            raise DataError("window starts inconsistent with predictions or total length")
    acc = np.zeros(total_len)
    cnt = np.zeros(total_len)
    for s, row in zip(starts, preds):
        acc[s:s + W] += row
        cnt[s:s + W] += 1
    out = np.full(total_len, np.nan)
    hit = cnt > 0
    out[hit] = acc[hit] / cnt[hit]
    if stats is not None:
        out = denormalize(out, stats)
        if clamp:
            out = np.where(hit, np.maximum(out, 0.0), np.nan)
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass
class ApplianceSpec:
    name: str
    power: float
    kind: str = "cyclic"  # cyclic | spike | program
    on_range: tuple[int, int] = (10, 20)
    off_range: tuple[int, int] = (30, 60)

    def __post_init__(self):
        if self.kind not in ("cyclic", "spike", "program"):
            raise DataError(f"unknown appliance kind {self.kind!r}")
        if self.power < 0:
            raise DataError("appliance power must be >= 0")
        for lo, hi in (self.on_range, self.off_range):
            if lo < 1 or hi < lo:
                raise DataError(f"{self.name}: duration ranges must satisfy 1 <= lo <= hi")


@dataclass
class SyntheticConfig:
    duration_samples: int = 20_000
    appliances: list[ApplianceSpec] = field(default_factory=list)
    noise_std: float = 20.0
    noise_clamp: str = "aggregate"  # "aggregate": max(sum + noise, 0); "noise": sum + max(noise, 0)
    seed: int = 0
    start_unix: int = 1_388_534_400
    spacing: int = 8

    def __post_init__(self):
        if self.duration_samples < 1:
            raise DataError("duration_samples must be >= 1")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if self.noise_clamp not in ("aggregate", "noise"):
            raise DataError("noise_clamp must be 'aggregate' or 'noise'")


def _program_profile(power: float, length: int) -> np.ndarray:
    # heat at full power, wash at a pulsing ~15%, short spin at ~40%
    heat = max(1, length // 4)
    spin = max(1, length // 6)
    wash = max(0, length - heat - spin)
    pulses = 0.15 * power * (1.0 + 0.5 * np.sign(np.sin(np.arange(wash) * np.pi / 6.0)))
    return np.concatenate([np.full(heat, power), pulses, np.full(spin, 0.4 * power)])[:length]


def _activations(rng: np.random.Generator, spec: ApplianceSpec, n: int) -> np.ndarray:
    out = np.zeros(n)
    t = int(rng.integers(0, spec.off_range[1] + 1))
    while t < n:
        on = int(rng.integers(spec.on_range[0], spec.on_range[1] + 1))
        stop = min(n, t + on)
        if spec.kind == "program":
            out[t:stop] = _program_profile(spec.power, on)[:stop - t]
        else:
            out[t:stop] = spec.power
        t = stop + int(rng.integers(spec.off_range[0], spec.off_range[1] + 1))
    return out


def generate_synthetic(config: SyntheticConfig) -> tuple[TimeSeries, list[TimeSeries]]:
    """Seeded synthetic household: per-appliance on/off traces plus noisy aggregate."""
    ss = np.random.SeedSequence(config.seed)
    child = ss.spawn(len(config.appliances) + 1)
    n = config.duration_samples
    ts = config.start_unix + config.spacing * np.arange(n, dtype=np.int64)
    apps = []
    for spec, seq in zip(config.appliances, child[1:]):
        apps.append(TimeSeries(ts, _activations(np.random.default_rng(seq), spec, n),
                               spec.name, 0, float(config.spacing)))
    total = np.sum([a.values for a in apps], axis=0) if apps else np.zeros(n)
    noise = np.random.default_rng(child[0]).normal(0.0, config.noise_std, n) if config.noise_std else np.zeros(n)
    if config.noise_clamp == "noise":
        agg = total + np.maximum(noise, 0.0)
    else:
        agg = np.maximum(total + noise, 0.0)
    return TimeSeries(ts, agg, "aggregate", 0, float(config.spacing)), apps


def default_household(seed: int = 0, duration_samples: int = 20_000, noise_std: float = 20.0) -> SyntheticConfig:
    """A kettle (target) over a cycling fridge and a washing-machine program."""
    return SyntheticConfig(
        duration_samples=duration_samples,
        appliances=[
            ApplianceSpec("kettle", 2000.0, "spike", (8, 25), (150, 500)),
            ApplianceSpec("fridge", 100.0, "cyclic", (40, 90), (60, 150)),
            ApplianceSpec("washing_machine", 1800.0, "program", (300, 600), (2500, 6000)),
        ],
        noise_std=noise_std,
        seed=seed,
    )
