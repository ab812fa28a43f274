"""OHLCV ingestion, technical indicators, trend labels and windowing."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IngestionError, InsufficientHistory, ShapeError

COLUMNS = ("date", "open", "high", "low", "close", "adj_close", "volume")
SMA_WINDOWS = (5, 10, 15, 20, 25, 30)
FEATURE_NAMES = ("d_open", "d_high", "d_low", "d_close", "d_adj_close") + tuple(f"sma{m}" for m in SMA_WINDOWS)
N_FEATURES = len(FEATURE_NAMES)
WARMUP = 30
NO_LABEL = -1


@dataclass
class OhlcvFrame:
    ticker: str
    dates: np.ndarray  # datetime64[D], strictly increasing
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        n = len(self.dates)
        for name in COLUMNS[1:]:
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{self.ticker}: column {name} has {len(getattr(self, name))} rows, expected {n}")
        if n > 1 and not np.all(np.diff(self.dates.astype("int64")) > 0):
            raise IngestionError(f"{self.ticker}: dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.dates)


@dataclass
class FeatureFrame:
    ticker: str
    dates: np.ndarray
    features: np.ndarray  # [n, 11], ordered as FEATURE_NAMES

    def __len__(self) -> int:
        return len(self.dates)


@dataclass
class WindowSample:
    features: np.ndarray  # [window, 11]
    stock_id: int
    label: int
    anchor_date: np.datetime64


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of features passed through unscaled

    def apply(self, x: np.ndarray) -> np.ndarray:
        scale = np.where(self.constant, 1.0, self.std)
        shift = np.where(self.constant, 0.0, self.mean)
        return ((x - shift) / scale).astype(np.float32)


@dataclass
class Dataset:
    """Stacked windows: the array form the trainer consumes."""

    x: np.ndarray  # [n, window, 11] float32
    y: np.ndarray  # [n] int64
    stock_ids: np.ndarray  # [n] int64
    dates: np.ndarray  # [n] datetime64[D]

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample], window: int = 64) -> "Dataset":
        if not samples:
            return cls.empty(window)
        return cls(
            x=np.stack([s.features for s in samples]).astype(np.float32),
            y=np.array([s.label for s in samples], dtype=np.int64),
            stock_ids=np.array([s.stock_id for s in samples], dtype=np.int64),
            dates=np.array([s.anchor_date for s in samples], dtype="datetime64[D]"),
        )

    @classmethod
    def empty(cls, window: int = 64) -> "Dataset":
        return cls(np.zeros((0, window, N_FEATURES), np.float32), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), np.zeros(0, "datetime64[D]"))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.stock_ids[idx], self.dates[idx])


# -- ingestion ------------------------------------------------------------------

def load_ohlcv(path, ticker: str | None = None) -> OhlcvFrame:
    """Parse one ``<TICKER>.csv`` file; rows are sorted by date on load."""
    path = Path(path)
    ticker = ticker or path.stem
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in COLUMNS}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                date = np.datetime64(dt.date.fromisoformat(row[pos["date"]].strip()), "D")
            except (ValueError, IndexError) as exc:
                raise IngestionError(f"{path}: row {lineno}: bad date ({exc})") from None
            values = []
            for col in COLUMNS[1:]:
                try:
                    v = float(row[pos[col]])
                except (ValueError, IndexError):
                    raise IngestionError(f"{path}: row {lineno}: unparsable {col}") from None
                if not np.isfinite(v):
                    raise IngestionError(f"{path}: row {lineno}: non-finite {col}")
                if col == "volume":
                    if v < 0:
                        raise IngestionError(f"{path}: row {lineno}: negative volume")
                elif v <= 0:
                    raise IngestionError(f"{path}: row {lineno}: non-positive {col} {v}")
                values.append(v)
            rows.append((date, lineno, values))
    rows.sort(key=lambda r: r[0])
    for (d0, l0, _), (d1, l1, _) in zip(rows, rows[1:]):
        if d0 == d1:
            raise IngestionError(f"{path}: row {l1}: duplicate date {d1} (also row {l0})")
    dates = np.array([r[0] for r in rows], dtype="datetime64[D]")
    table = np.array([r[2] for r in rows], dtype=np.float64).reshape(len(rows), 6)
    return OhlcvFrame(ticker, dates, *(table[:, i] for i in range(6)))


def save_ohlcv(frame: OhlcvFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for i in range(len(frame)):
            writer.writerow([str(frame.dates[i])] + [repr(float(getattr(frame, c)[i])) for c in COLUMNS[1:]])


# -- indicators -------------------------------------------------------------------

def pct_change(series: np.ndarray) -> np.ndarray:
    """``s_t / s_{t-1} - 1``; the first entry is NaN."""
    s = np.asarray(series, dtype=np.float64)
    out = np.full(s.shape, np.nan)
    out[1:] = s[1:] / s[:-1] - 1.0
    return out


def sma_ratio(series: np.ndarray, m: int) -> np.ndarray:
    """Mean of the last ``m`` values divided by the current value, minus one.

    NaN until ``m`` values are available.
    """
    s = np.asarray(series, dtype=np.float64)
    out = np.full(s.shape, np.nan)
    if len(s) >= m:
        means = np.lib.stride_tricks.sliding_window_view(s, m).mean(axis=1)
        out[m - 1:] = means / s[m - 1:] - 1.0
    return out


def compute_indicators(frame: OhlcvFrame, sma_windows: Sequence[int] = SMA_WINDOWS,
                       warmup: int = WARMUP) -> FeatureFrame:
    if len(frame) <= warmup:
        raise InsufficientHistory(f"{frame.ticker}: {len(frame)} rows, need more than {warmup}")
    if max(sma_windows) > warmup:
        raise ConfigError(f"SMA window {max(sma_windows)} exceeds warm-up {warmup}")
    cols = [pct_change(frame.open), pct_change(frame.high), pct_change(frame.low),
            pct_change(frame.close), pct_change(frame.adj_close)]
    cols += [sma_ratio(frame.adj_close, m) for m in sma_windows]
    feats = np.stack(cols, axis=1)[warmup:]
    return FeatureFrame(frame.ticker, frame.dates[warmup:].copy(), feats.astype(np.float32))


def label_movement(frame: OhlcvFrame, up_thresh: float = 0.0055, down_thresh: float = -0.005) -> np.ndarray:
    """Next-day trend label per date: 1 up, 0 down, ``NO_LABEL`` otherwise.

    The last date never has a label since its next-day price is unknown.
    """
    if down_thresh >= up_thresh:
        raise ConfigError(f"down threshold {down_thresh} must be below up threshold {up_thresh}")
    labels = np.full(len(frame), NO_LABEL, dtype=np.int64)
    adj = np.asarray(frame.adj_close, dtype=np.float64)
    move = adj[1:] / adj[:-1] - 1.0
    labels[:-1][move >= up_thresh] = 1
    labels[:-1][move <= down_thresh] = 0
    return labels


def make_windows(features: FeatureFrame, labels: np.ndarray, stock_id: int = 0, window: int = 64,
                 stride: int = 1, report: dict | None = None) -> list[WindowSample]:
    """One sample per labelled anchor row that has ``window`` rows of history.

    ``labels`` is aligned with the feature rows. When ``report`` is given,
    labelled anchors skipped for lack of history are counted under
    ``"skipped_history"``.
    """
    labels = np.asarray(labels)
    if len(labels) != len(features):
        raise ShapeError(f"{len(labels)} labels for {len(features)} feature rows")
    samples = []
    skipped = 0
    for a in range(len(features)):
        if labels[a] == NO_LABEL:
            continue
        if a < window - 1:
            skipped += 1
            continue
        if (a - (window - 1)) % stride:
            continue
        samples.append(WindowSample(features.features[a - window + 1:a + 1].copy(), stock_id,
                                    int(labels[a]), features.dates[a]))
    if report is not None:
        report["skipped_history"] = report.get("skipped_history", 0) + skipped
    return samples


def frame_samples(frame: OhlcvFrame, stock_id: int, window: int = 64, up_thresh: float = 0.0055,
                  down_thresh: float = -0.005, sma_windows: Sequence[int] = SMA_WINDOWS,
                  report: dict | None = None) -> list[WindowSample]:
    """Indicators, labels and windows for a single stock."""
    feats = compute_indicators(frame, sma_windows)
    labels = label_movement(frame, up_thresh, down_thresh)[len(frame) - len(feats):]
    if report is not None:
        report["labelled"] = report.get("labelled", 0) + int(np.sum(labels != NO_LABEL))
        report["dropped_band"] = report.get("dropped_band", 0) + int(np.sum(labels[:-1] == NO_LABEL))
    return make_windows(feats, labels, stock_id, window, report=report)


# -- splitting and normalisation --------------------------------------------------

def _as_day(value) -> np.datetime64:
    if isinstance(value, str):
        value = dt.date.fromisoformat(value)
    return np.datetime64(value, "D")


def split_by_date(samples, train_range, test_range):
    """Assign samples to train/test by anchor date over half-open ranges.

    Works on a ``Dataset`` or a list of ``WindowSample``; samples outside
    both ranges are discarded.
    """
    tr0, tr1 = map(_as_day, train_range)
    te0, te1 = map(_as_day, test_range)
    if tr1 < tr0 or te1 < te0:
        raise ConfigError("date range end precedes its start")
    if tr0 < tr1 and te0 < te1 and tr0 < te1 and te0 < tr1:
        raise ConfigError(f"train range {train_range} overlaps test range {test_range}")
    if isinstance(samples, Dataset):
        d = samples.dates
        return (samples.subset((d >= tr0) & (d < tr1)), samples.subset((d >= te0) & (d < te1)))
    train = [s for s in samples if tr0 <= s.anchor_date < tr1]
    test = [s for s in samples if te0 <= s.anchor_date < te1]
    return train, test


def fit_norm_stats(x: np.ndarray) -> NormStats:
    rows = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    if len(rows) == 0:
        raise ShapeError("cannot fit normalisation on an empty training set")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return NormStats(mean, std, constant)


def normalize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, NormStats]:
    """Z-score features with training statistics only (population std)."""
    stats = fit_norm_stats(train.x)
    norm = lambda d: Dataset(stats.apply(d.x), d.y, d.stock_ids, d.dates)  # noqa: E731
    return norm(train), norm(test), stats


# -- synthetic data ---------------------------------------------------------------

@dataclass
class RegimeParams:
    """Parameters of the regime-switching random walk.

    Each stock alternates between an up-drift and a down-drift regime; the
    regime persists day to day with probability ``1 - switch_prob``.
    """

    drift: float = 0.01
    noise: float = 0.004
    switch_prob: float = 0.03
    intraday_noise: float = 0.002
    start_price: float = 100.0
    up_fraction: float = 0.5  # stationary share of the up regime
    fixed_regime: int | None = None  # force +1 or -1 for every day

    def __post_init__(self):
        if self.noise < 0 or self.intraday_noise < 0 or not 0 <= self.switch_prob <= 1:
            raise ConfigError("noise levels must be >= 0 and switch_prob in [0, 1]")


@dataclass
class SynthResult:
    frames: list[OhlcvFrame]
    regimes: list[np.ndarray] = field(default_factory=list)


def business_days(start: str | dt.date, n: int) -> np.ndarray:
    start = np.datetime64(_as_day(start), "D")
    return np.busday_offset(start, np.arange(n), roll="forward")


def synth_generate(seed: int, n_stocks: int, n_days: int, regime_params: RegimeParams | None = None,
                   start: str = "2014-01-02", return_regimes: bool = False):
    """Seeded regime-switching OHLCV series, one frame per synthetic ticker."""
    if n_days <= 100:
        raise ConfigError(f"n_days must exceed 100, got {n_days}")
    p = regime_params or RegimeParams()
    dates = business_days(start, n_days)
    frames, regimes = [], []
    root = np.random.SeedSequence(seed)
    for sid, child in enumerate(root.spawn(n_stocks)):
        rng = np.random.default_rng(child)
        state = np.empty(n_days, dtype=np.int64)
        if p.fixed_regime is not None:
            state[:] = p.fixed_regime
        else:
            # asymmetric switching keeps the stationary up share at up_fraction
            to_down = p.switch_prob * 2 * (1 - p.up_fraction)
            to_up = p.switch_prob * 2 * p.up_fraction
            u = rng.random(n_days)
            state[0] = 1 if u[0] < p.up_fraction else -1
            for t in range(1, n_days):
                flip = to_down if state[t - 1] == 1 else to_up
                state[t] = -state[t - 1] if u[t] < flip else state[t - 1]
        returns = p.drift * state + p.noise * rng.standard_normal(n_days)
        returns[0] = 0.0
        adj = p.start_price * np.exp(np.cumsum(returns))
        # close differs from adj_close by a constant split/dividend factor
        factor = 1.0 + 0.5 * rng.random()
        close = adj * factor
        prev_close = np.concatenate([[close[0]], close[:-1]])
        open_ = prev_close * np.exp(p.intraday_noise * rng.standard_normal(n_days))
        high = np.maximum(open_, close) * (1.0 + np.abs(p.intraday_noise * rng.standard_normal(n_days)))
        shave = np.minimum(np.abs(p.intraday_noise * rng.standard_normal(n_days)), 0.5)
        low = np.minimum(open_, close) * (1.0 - shave)
        volume = np.round(1e6 * (1.0 + 0.2 * rng.random(n_days)))
        frames.append(OhlcvFrame(f"SYN{sid:02d}", dates.copy(), open_, high, low, close, adj, volume))
        regimes.append(state)
    if return_regimes:
        return SynthResult(frames, regimes)
    return frames
