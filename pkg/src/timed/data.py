"""Benchmark datasets, CSV ingestion, min-max scaling and batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import Rng

BENCHMARK_SHAPES = {
    "stocks": (4407, 24, 6),
    "sines": (10000, 24, 4),
    "energy": (19711, 24, 5),
    "ecg": (15000, 24, 3),
}


@dataclass
class Dataset:
    samples: np.ndarray  # (N, T, F), normalised to [0, 1]
    name: str
    feature_names: list[str]
    stats: tuple[np.ndarray, np.ndarray]  # per-feature (min, max) of the raw corpus

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples.shape

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, index) -> "Dataset":
        return replace(self, samples=self.samples[np.asarray(index)])


def compute_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
    return flat.min(axis=0), flat.max(axis=0)


def minmax_normalize(x, stats) -> np.ndarray:
    lo, hi = (np.asarray(s, dtype=np.float64) for s in stats)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("normalisation stats must be finite")
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = (np.asarray(x, dtype=np.float64) - lo) / safe
    return np.where(span > 0, out, 0.0)


def denormalize(x, stats) -> np.ndarray:
    lo, hi = (np.asarray(s, dtype=np.float64) for s in stats)
    return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


def _from_raw(raw: np.ndarray, name: str, feature_names: Sequence[str]) -> Dataset:
    stats = compute_stats(raw)
    samples = minmax_normalize(raw, stats).astype(np.float32)
    return Dataset(samples, name, list(feature_names), stats)


# ---------------------------------------------------------------------------
# sines


def gen_sines(n: int, t: int, f: int, rng: Rng) -> Dataset:
    """x(t) = 0.5 * (sin(eta * t + theta) + 1) per channel.

    eta ~ U[0.1, 0.2] and theta ~ U[0, 0.1], drawn independently for every
    sample and channel. Values are already inside [0, 1], so the stored stats
    are the identity range.
    """
    if min(n, t, f) < 1:
        raise ValueError("n, t and f must all be >= 1")
    eta = rng.uniform(0.1, 0.2, (n, 1, f)).astype(np.float64)
    theta = rng.uniform(0.0, 0.1, (n, 1, f)).astype(np.float64)
    steps = np.arange(t, dtype=np.float64).reshape(1, t, 1)
    x = 0.5 * (np.sin(eta * steps + theta) + 1.0)
    stats = (np.zeros(f), np.ones(f))
    return Dataset(x.astype(np.float32), "sines", [f"f{i}" for i in range(f)], stats)


# ---------------------------------------------------------------------------
# ECG

WAVES = ("P", "Q", "R", "S", "T")
WAVE_SIGNS = {"P": 1.0, "Q": -1.0, "R": 1.0, "S": -1.0, "T": 1.0}


@dataclass(frozen=True)
class EcgSpec:
    """Ranges for the five Gaussian bumps of a beat.

    Offsets are measured in samples from the R peak. Amplitudes are
    magnitudes; Q and S are subtracted.
    """

    amplitude: dict = field(
        default_factory=lambda: {"P": (0.1, 0.25), "Q": (0.1, 0.2), "R": (0.8, 1.2), "S": (0.1, 0.2), "T": (0.1, 0.25)}
    )
    width: dict = field(default_factory=lambda: {w: (0.5, 1.5) for w in WAVES})
    offset: dict = field(
        default_factory=lambda: {"P": (-6.0, -4.0), "Q": (-1.5, -1.0), "R": (0.0, 0.0), "S": (1.0, 1.5), "T": (3.5, 5.0)}
    )
    beats: tuple[int, int] = (1, 2)
    noise_std: float = 0.02

    def validate(self, t: int) -> None:
        for w in WAVES:
            lo, hi = self.width[w]
            if lo <= 0 or hi < lo:
                raise ValueError(f"EcgSpec: width range for {w} must be positive and ordered, got {(lo, hi)}")
            if self.amplitude[w][1] < self.amplitude[w][0]:
                raise ValueError(f"EcgSpec: amplitude range for {w} is unordered")
            if self.offset[w][1] < self.offset[w][0]:
                raise ValueError(f"EcgSpec: offset range for {w} is unordered")
        if not 1 <= self.beats[0] <= self.beats[1] <= 2:
            raise ValueError(f"EcgSpec: beats per window must lie in {{1, 2}}, got {self.beats}")
        if self.noise_std < 0:
            raise ValueError("EcgSpec: noise_std must be nonnegative")
        lo, hi = self.center_bounds(t)
        if lo > hi:
            raise ValueError(f"EcgSpec: beat of span {self.span()} does not fit in a window of {t} samples")

    def span(self) -> tuple[float, float]:
        return min(r[0] for r in self.offset.values()), max(r[1] for r in self.offset.values())

    def center_bounds(self, t: int) -> tuple[float, float]:
        """R-peak positions that keep every wave centre inside the window."""
        before, after = self.span()
        return -before, (t - 1) - after


def _draw(rng: Rng, lo: float, hi: float, shape=()) -> np.ndarray:
    if hi == lo:
        return np.full(shape, lo, dtype=np.float64)
    return rng.uniform(lo, hi, shape).astype(np.float64)


def ecg_beat(steps: np.ndarray, center: float, amplitude: dict, width: dict, offset: dict) -> np.ndarray:
    """Sum of the five signed Gaussian bumps of one beat."""
    out = np.zeros_like(steps, dtype=np.float64)
    for w in WAVES:
        c = center + offset[w]
        out += WAVE_SIGNS[w] * amplitude[w] * np.exp(-((steps - c) ** 2) / (2.0 * width[w] ** 2))
    return out


def ecg_raw(n: int, t: int, f: int, spec: EcgSpec, rng: Rng) -> np.ndarray:
    """Unnormalised ECG-like windows; beats share timing across channels."""
    spec.validate(t)
    steps = np.arange(t, dtype=np.float64)
    lo, hi = spec.center_bounds(t)
    raw = np.zeros((n, t, f))
    for i in range(n):
        n_beats = int(rng.integers(spec.beats[0], spec.beats[1] + 1))
        centers = _draw(rng, lo, hi, (n_beats,))
        for c in centers:
            for ch in range(f):
                amp = {w: float(_draw(rng, *spec.amplitude[w])) for w in WAVES}
                wid = {w: float(_draw(rng, *spec.width[w])) for w in WAVES}
                off = {w: float(_draw(rng, *spec.offset[w])) for w in WAVES}
                raw[i, :, ch] += ecg_beat(steps, c, amp, wid, off)
    if spec.noise_std > 0:
        raw += spec.noise_std * rng.normal((n, t, f)).astype(np.float64)
    return raw


def gen_ecg(n: int, t: int, f: int, spec: EcgSpec | None, rng: Rng) -> Dataset:
    spec = spec or EcgSpec()
    raw = ecg_raw(n, t, f, spec, rng)
    return _from_raw(raw, "ecg", [f"lead{i}" for i in range(f)])


# ---------------------------------------------------------------------------
# CSV


def read_csv_columns(path, columns: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty CSV file") from None
        names = list(columns) if columns else header
        missing = [c for c in names if c not in header]
        if missing:
            raise ValueError(f"{path}: columns {missing} not in header {header}")
        idx = [header.index(c) for c in names]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            values = []
            for col, j in zip(names, idx):
                cell = row[j].strip() if j < len(row) else ""
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}: non-numeric value {cell!r} at row {lineno}, column {col!r}") from None
            rows.append(values)
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(names)), names


def sliding_windows(x: np.ndarray, t: int, stride: int = 1) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if len(x) < t:
        raise ValueError(f"need at least {t} rows for a window, got {len(x)}")
    starts = range(0, len(x) - t + 1, stride)
    return np.stack([x[s : s + t] for s in starts])


def load_csv_windowed(path, t: int, stride: int = 1, columns: Sequence[str] | None = None, name: str | None = None) -> Dataset:
    """Windows of ``t`` consecutive rows; scaling uses the whole file."""
    raw, names = read_csv_columns(path, columns)
    if len(raw) < t:
        raise ValueError(f"{path}: {len(raw)} data rows is fewer than the window length {t}")
    stats = compute_stats(raw)
    windows = sliding_windows(minmax_normalize(raw, stats), t, stride)
    return Dataset(windows.astype(np.float32), name or Path(path).stem, names, stats)


# ---------------------------------------------------------------------------
# splitting and batching


def shuffle_split(ds: Dataset, train_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(ds)
    perm = rng.permutation(n)
    k = int(round(n * train_fraction))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def batch_iter(samples: np.ndarray, batch_size: int, rng: Rng) -> Iterator[np.ndarray]:
    """One epoch of shuffled full batches; the short remainder is dropped."""
    n = len(samples)
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    perm = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield samples[perm[start : start + batch_size]]
