"""Smart-meter ingestion, weather join, windowing, splitting and scaling.

All timestamps are held as int64 seconds since the Unix epoch (UTC). All
reals are float64.

Feature layout of every window row::

    0 kwh
    1 temperature_c
    2 humidity_pct
    3 sin(2*pi*hour_of_day/48)
    4 cos(2*pi*hour_of_day/48)
    5 sin(2*pi*day_of_week/7)
    6 cos(2*pi*day_of_week/7)
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _rng
from .errors import (
    BadDimensions,
    BadFractions,
    DuplicateReading,
    EmptyHousehold,
    EmptyTrainingSet,
    MalformedHeader,
    SeriesTooShort,
    WeatherCoverageGap,
)

HALF_HOUR = 1800
FEATURES = (
    "kwh",
    "temperature_c",
    "humidity_pct",
    "hour_sin",
    "hour_cos",
    "dow_sin",
    "dow_cos",
)
N_FEATURES = len(FEATURES)
READINGS_HEADER = ("household_id", "timestamp", "kwh")
WEATHER_HEADER = ("timestamp", "temperature_c", "humidity_pct")
MAX_WEATHER_GAP = 6 * 3600
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


# ---------------------------------------------------------------------------
# timestamps
# ---------------------------------------------------------------------------


def parse_timestamp(text: str) -> int:
    """Parse an ISO-8601 instant to epoch seconds. Naive stamps are UTC."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    # py3.10 fromisoformat only takes 0, 3 or 6 fractional digits
    if "." in s:
        head, _, rest = s.partition(".")
        digits = ""
        while rest and rest[0].isdigit():
            digits += rest[0]
            rest = rest[1:]
        if not digits:
            raise ValueError(f"bad fractional seconds in {text!r}")
        if int(digits) != 0:
            raise ValueError(f"sub-second timestamp {text!r}")
        s = head + rest
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - _EPOCH) // timedelta(seconds=1)


def format_timestamp(seconds: int) -> str:
    return datetime.fromtimestamp(int(seconds), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def half_hour_index(ts):
    """0..47 index of the half-hour within the UTC day."""
    return (np.asarray(ts, dtype=np.int64) % 86400) // HALF_HOUR


def day_of_week(ts):
    """0 = Monday .. 6 = Sunday (the epoch fell on a Thursday)."""
    return ((np.asarray(ts, dtype=np.int64) // 86400) + 3) % 7


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HouseholdReadings:
    household_id: str
    timestamps: np.ndarray
    kwh: np.ndarray

    def __len__(self):
        return len(self.timestamps)


@dataclass
class ReadingSet:
    """Validated readings grouped by household, plus the rows that were skipped.

    ``skipped`` holds ``(row_number, reason)`` pairs; row numbers count the
    header as row 1.
    """

    households: dict[str, HouseholdReadings]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def household_ids(self) -> list[str]:
        return sorted(self.households)

    @property
    def n_readings(self) -> int:
        return sum(len(h) for h in self.households.values())

    @property
    def skip_count(self) -> int:
        return len(self.skipped)

    def __len__(self):
        return len(self.households)

    def __getitem__(self, household_id):
        return self.households[household_id]

    @classmethod
    def from_arrays(cls, rows: dict[str, tuple[Sequence[int], Sequence[float]]]) -> "ReadingSet":
        out = {}
        for hid, (ts, kwh) in rows.items():
            ts = np.asarray(ts, dtype=np.int64)
            kwh = np.asarray(kwh, dtype=np.float64)
            order = np.argsort(ts, kind="stable")
            ts, kwh = ts[order], kwh[order]
            if len(ts) > 1 and np.any(np.diff(ts) == 0):
                raise DuplicateReading(f"household {hid} has duplicate timestamps")
            if np.any(kwh < 0) or not np.all(np.isfinite(kwh)):
                raise ValueError(f"household {hid} has invalid kwh values")
            if np.any(ts % HALF_HOUR):
                raise ValueError(f"household {hid} has timestamps off the half-hour grid")
            out[hid] = HouseholdReadings(hid, ts, kwh)
        return cls(dict(sorted(out.items())))

    def subset(self, household_ids: Iterable[str]) -> "ReadingSet":
        return ReadingSet({h: self.households[h] for h in sorted(household_ids)})

    def merge(self, other: "ReadingSet") -> "ReadingSet":
        clash = set(self.households) & set(other.households)
        if clash:
            raise DuplicateReading(f"households present in both sets: {sorted(clash)[:5]}")
        return ReadingSet(dict(sorted({**self.households, **other.households}.items())))


@dataclass(frozen=True)
class WeatherSeries:
    timestamps: np.ndarray
    temperature_c: np.ndarray
    humidity_pct: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        temp = np.asarray(self.temperature_c, dtype=np.float64)
        hum = np.asarray(self.humidity_pct, dtype=np.float64)
        if not (len(ts) == len(temp) == len(hum)):
            raise ValueError("weather columns differ in length")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("weather timestamps must be strictly increasing")
        if np.any((hum < 0) | (hum > 100)):
            raise ValueError("humidity_pct outside [0, 100]")
        if not (np.all(np.isfinite(temp)) and np.all(np.isfinite(hum))):
            raise ValueError("non-finite weather value")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "temperature_c", temp)
        object.__setattr__(self, "humidity_pct", hum)

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class AlignedSeries:
    """One gap-free run of half-hourly readings joined with weather."""

    household_id: str
    segment: int
    timestamps: np.ndarray
    kwh: np.ndarray
    temperature_c: np.ndarray
    humidity_pct: np.ndarray
    filled: np.ndarray

    def __len__(self):
        return len(self.timestamps)

    @property
    def hour_of_day(self):
        return half_hour_index(self.timestamps)

    @property
    def day_of_week(self):
        return day_of_week(self.timestamps)

    def feature_matrix(self) -> np.ndarray:
        hod = self.hour_of_day.astype(np.float64)
        dow = self.day_of_week.astype(np.float64)
        return np.column_stack(
            [
                self.kwh,
                self.temperature_c,
                self.humidity_pct,
                np.sin(2 * np.pi * hod / 48),
                np.cos(2 * np.pi * hod / 48),
                np.sin(2 * np.pi * dow / 7),
                np.cos(2 * np.pi * dow / 7),
            ]
        )


@dataclass(frozen=True)
class SampleSet:
    """Supervised windows.

    features : (n, W, F) array
    targets : (n, H) array
    anchors : (n,) epoch seconds of each sample's first target step
    """

    features: np.ndarray
    targets: np.ndarray
    anchors: np.ndarray

    def __len__(self):
        return self.features.shape[0]

    @property
    def window(self):
        return self.features.shape[1]

    @property
    def horizon(self):
        return self.targets.shape[1]

    def __getitem__(self, idx):
        return SampleSet(self.features[idx], self.targets[idx], self.anchors[idx])

    @classmethod
    def empty(cls, window, horizon, n_features=N_FEATURES):
        return cls(
            np.empty((0, window, n_features)),
            np.empty((0, horizon)),
            np.empty(0, dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.anchors for p in parts]),
        )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

LCL_ID = "lclid"
LCL_TIME = "datetime"
LCL_KWH_PREFIX = "kwh/hh"


def _open_text(source) -> io.TextIOBase:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8-sig"))
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8-sig", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def _column_map(header, fmt):
    names = [h.strip() for h in header]
    if fmt == "canonical":
        if tuple(names) != READINGS_HEADER:
            raise MalformedHeader(f"expected {','.join(READINGS_HEADER)}, got {','.join(names)}")
        return 0, 1, 2
    if fmt == "lcl":
        lower = [n.lower() for n in names]
        try:
            i_id = lower.index(LCL_ID)
            i_t = lower.index(LCL_TIME)
            i_k = next(i for i, n in enumerate(lower) if n.startswith(LCL_KWH_PREFIX))
        except (ValueError, StopIteration):
            raise MalformedHeader(f"not a Low Carbon London export header: {names}") from None
        return i_id, i_t, i_k
    raise ValueError(f"unknown reading format {fmt!r}")


def parse_readings(source, format: str = "canonical") -> ReadingSet:
    """Parse a half-hourly readings CSV.

    ``format="canonical"`` expects the header ``household_id,timestamp,kwh``;
    ``format="lcl"`` maps the Low Carbon London export columns
    (``LCLid``, ``DateTime``, ``KWH/hh (per half hour)``) onto it.

    Rows with a non-numeric, non-finite or negative kwh, or an unparseable or
    off-grid timestamp, are skipped and listed in ``ReadingSet.skipped``.
    A repeated (household, timestamp) pair raises :class:`DuplicateReading`.
    """
    fh = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedHeader("empty input") from None
        i_id, i_t, i_k = _column_map(header, format)
        width = len(header)
        per_house: dict[str, tuple[list[int], list[float]]] = {}
        seen: dict[str, set[int]] = {}
        skipped = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                skipped.append((rowno, "wrong field count"))
                continue
            hid = row[i_id].strip()
            if not hid:
                skipped.append((rowno, "empty household_id"))
                continue
            try:
                ts = parse_timestamp(row[i_t])
            except ValueError:
                skipped.append((rowno, "bad timestamp"))
                continue
            if ts % HALF_HOUR:
                skipped.append((rowno, "timestamp not on a half-hour boundary"))
                continue
            try:
                kwh = float(row[i_k])
            except ValueError:
                skipped.append((rowno, "non-numeric kwh"))
                continue
            if not math.isfinite(kwh):
                skipped.append((rowno, "non-numeric kwh"))
                continue
            if kwh < 0:
                skipped.append((rowno, "negative kwh"))
                continue
            stamps = seen.setdefault(hid, set())
            if ts in stamps:
                raise DuplicateReading(f"row {rowno}: duplicate reading for {hid} at {format_timestamp(ts)}")
            stamps.add(ts)
            tl, kl = per_house.setdefault(hid, ([], []))
            tl.append(ts)
            kl.append(kwh)
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()
    rs = ReadingSet.from_arrays(per_house)
    rs.skipped = skipped
    return rs


def parse_weather(source) -> WeatherSeries:
    fh = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedHeader("empty input") from None
        if tuple(header) != WEATHER_HEADER:
            raise MalformedHeader(f"expected {','.join(WEATHER_HEADER)}, got {','.join(header)}")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((parse_timestamp(row[0]), float(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"weather row {rowno}: {exc}") from None
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()
    rows.sort()
    ts, temp, hum = zip(*rows) if rows else ((), (), ())
    return WeatherSeries(np.array(ts, dtype=np.int64), np.array(temp), np.array(hum))


def write_readings(readings: ReadingSet) -> str:
    """Canonical CSV: households sorted, timestamps ascending, kwh via repr."""
    out = io.StringIO()
    out.write(",".join(READINGS_HEADER) + "\n")
    for hid in readings.household_ids:
        h = readings[hid]
        for ts, kwh in zip(h.timestamps.tolist(), h.kwh.tolist()):
            out.write(f"{hid},{format_timestamp(ts)},{kwh!r}\n")
    return out.getvalue()


def write_weather(weather: WeatherSeries) -> str:
    out = io.StringIO()
    out.write(",".join(WEATHER_HEADER) + "\n")
    for ts, t, h in zip(weather.timestamps.tolist(), weather.temperature_c.tolist(), weather.humidity_pct.tolist()):
        out.write(f"{format_timestamp(ts)},{t!r},{h!r}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# weather join
# ---------------------------------------------------------------------------


def _interp_weather(ts: np.ndarray, weather: WeatherSeries, household_id: str):
    wt = weather.timestamps
    if len(wt) == 0:
        raise WeatherCoverageGap("weather series is empty")
    right = np.searchsorted(wt, ts, side="left")
    exact = (right < len(wt)) & (wt[np.minimum(right, len(wt) - 1)] == ts)
    outside = ((right == 0) | (right == len(wt))) & ~exact
    if np.any(outside):
        bad = ts[np.argmax(outside)]
        raise WeatherCoverageGap(f"{household_id}: reading at {format_timestamp(bad)} is outside weather coverage")
    lo = np.clip(right - 1, 0, len(wt) - 1)
    hi = np.clip(right, 0, len(wt) - 1)
    span = np.where(exact, 0, wt[hi] - wt[lo])
    if np.any(span > MAX_WEATHER_GAP):
        bad = ts[np.argmax(span > MAX_WEATHER_GAP)]
        raise WeatherCoverageGap(f"{household_id}: weather missing for more than 6 h around {format_timestamp(bad)}")
    tf = ts.astype(np.float64)
    wf = wt.astype(np.float64)
    return np.interp(tf, wf, weather.temperature_c), np.interp(tf, wf, weather.humidity_pct)


def join_weather(
    readings: ReadingSet,
    weather: WeatherSeries,
    gap_policy: str = "ffill",
    max_fill: int = 2,
) -> list[AlignedSeries]:
    """Pair every reading with linearly interpolated weather.

    Gap policies:

    ``"ffill"``  gaps of up to ``max_fill`` missing half-hours are filled with
                 the previous kwh (and flagged); longer gaps split the series.
    ``"drop"``   every gap splits the series into separate segments.

    Returns the segments of all households, ordered by household id then time.
    """
    if gap_policy not in ("ffill", "drop"):
        raise ValueError(f"unknown gap policy {gap_policy!r}")
    fill_limit = max_fill if gap_policy == "ffill" else 0
    out = []
    for hid in readings.household_ids:
        h = readings[hid]
        if len(h) == 0:
            raise EmptyHousehold(hid)
        ts_parts, kwh_parts, flag_parts = [[]], [[]], [[]]
        prev_t = prev_k = None
        for t, k in zip(h.timestamps.tolist(), h.kwh.tolist()):
            if prev_t is not None:
                missing = (t - prev_t) // HALF_HOUR - 1
                if 0 < missing <= fill_limit:
                    for j in range(1, missing + 1):
                        ts_parts[-1].append(prev_t + j * HALF_HOUR)
                        kwh_parts[-1].append(prev_k)
                        flag_parts[-1].append(True)
                elif missing > fill_limit:
                    ts_parts.append([])
                    kwh_parts.append([])
                    flag_parts.append([])
            ts_parts[-1].append(t)
            kwh_parts[-1].append(k)
            flag_parts[-1].append(False)
            prev_t, prev_k = t, k
        for seg, (ts, kwh, flags) in enumerate(zip(ts_parts, kwh_parts, flag_parts)):
            ts = np.array(ts, dtype=np.int64)
            temp, hum = _interp_weather(ts, weather, hid)
            out.append(AlignedSeries(hid, seg, ts, np.array(kwh), temp, hum, np.array(flags, dtype=bool)))
    return out


# ---------------------------------------------------------------------------
# windowing and splitting
# ---------------------------------------------------------------------------


def make_windows(series: AlignedSeries, window: int, horizon: int, stride: int = 1) -> SampleSet:
    """Slice a series into (features, target) samples.

    Sample ``i`` uses rows ``[i*stride, i*stride + window)`` as features and
    the kwh of the next ``horizon`` rows as target.
    """
    if window < 1 or horizon < 1 or stride < 1:
        raise ValueError("window, horizon and stride must be >= 1")
    n_rows = len(series)
    if n_rows < window + horizon:
        raise SeriesTooShort(f"{series.household_id}: {n_rows} rows < window {window} + horizon {horizon}")
    n = (n_rows - window - horizon) // stride + 1
    mat = series.feature_matrix()
    starts = np.arange(n) * stride
    feat_idx = starts[:, None] + np.arange(window)[None, :]
    targ_idx = starts[:, None] + window + np.arange(horizon)[None, :]
    return SampleSet(
        np.ascontiguousarray(mat[feat_idx]),
        np.ascontiguousarray(series.kwh[targ_idx]),
        series.timestamps[starts + window].copy(),
    )


def check_fractions(fractions):
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(not f > 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be three positive reals summing to 1, got {fractions}")
    return fr


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    _, f_val, f_test = check_fractions(fractions)
    n_val = int(math.floor(n * f_val + 1e-9))
    n_test = int(math.floor(n * f_test + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_chronological(samples: SampleSet, fractions=(0.8, 0.1, 0.1)):
    """Chronological train/val/test split; the floor remainder goes to train."""
    n_train, n_val, _ = split_counts(len(samples), fractions)
    order = np.argsort(samples.anchors, kind="stable")
    ordered = samples[order]
    return (
        ordered[: n_train],
        ordered[n_train : n_train + n_val],
        ordered[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


class WindowScaler(TransformerMixin, BaseEstimator):
    """Per-feature standardisation of ``(n, W, F)`` window tensors.

    Statistics are the population mean and standard deviation over every
    row of every training window. Features with zero spread get a scale
    of 1 and are listed in ``degenerate_``. Targets are scaled with the
    statistics of feature ``target_feature`` (kwh by default).
    """

    def __init__(self, target_feature=0):
        self.target_feature = target_feature

    def fit(self, X, y=None):
        X = self._check(X)
        if X.shape[0] == 0:
            raise EmptyTrainingSet("cannot fit a scaler on zero samples")
        flat = X.reshape(-1, X.shape[-1])
        self.mean_ = flat.mean(axis=0)
        std = flat.std(axis=0)
        tiny = 1e-12 * np.maximum(1.0, np.abs(self.mean_))
        self.degenerate_ = std <= tiny
        self.scale_ = np.where(self.degenerate_, 1.0, std)
        self.n_features_in_ = X.shape[-1]
        return self

    def _check(self, X):
        X = check_array(X, allow_nd=True, ensure_2d=False, ensure_min_samples=0, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected (n, W, F) windows, got shape {X.shape}")
        return X

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = self._check(X)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = self._check(X)
        return X * self.scale_ + self.mean_

    def transform_target(self, y):
        check_is_fitted(self, "mean_")
        j = self.target_feature
        return (np.asarray(y, dtype=np.float64) - self.mean_[j]) / self.scale_[j]

    def inverse_transform_target(self, y):
        check_is_fitted(self, "mean_")
        j = self.target_feature
        return np.asarray(y, dtype=np.float64) * self.scale_[j] + self.mean_[j]

    def to_dict(self):
        check_is_fitted(self, "mean_")
        return {
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "degenerate": self.degenerate_.tolist(),
            "target_feature": self.target_feature,
        }

    @classmethod
    def from_dict(cls, d):
        s = cls(target_feature=d.get("target_feature", 0))
        s.mean_ = np.array(d["mean"], dtype=np.float64)
        s.scale_ = np.array(d["scale"], dtype=np.float64)
        s.degenerate_ = np.array(d["degenerate"], dtype=bool)
        s.n_features_in_ = len(s.mean_)
        return s


def fit_scaler(train: SampleSet) -> WindowScaler:
    if len(train) == 0:
        raise EmptyTrainingSet("training split is empty")
    return WindowScaler().fit(train.features)


def apply_scaler(scaler: WindowScaler, samples: SampleSet) -> SampleSet:
    return SampleSet(scaler.transform(samples.features), scaler.transform_target(samples.targets), samples.anchors)


def invert_scaler(scaler: WindowScaler, samples: SampleSet) -> SampleSet:
    return SampleSet(
        scaler.inverse_transform(samples.features),
        scaler.inverse_transform_target(samples.targets),
        samples.anchors,
    )


# ---------------------------------------------------------------------------
# per-client preparation
# ---------------------------------------------------------------------------


@dataclass
class ClientData:
    """One household's scaled splits. The scaler never leaves the client."""

    client_id: int
    household_id: str
    train: SampleSet
    val: SampleSet
    test: SampleSet
    scaler: WindowScaler
    filled_steps: int = 0

    @property
    def n_train(self):
        return len(self.train)


def household_samples(segments: Sequence[AlignedSeries], window, horizon, stride=1) -> SampleSet:
    parts = [make_windows(s, window, horizon, stride) for s in segments if len(s) >= window + horizon]
    if not parts:
        raise SeriesTooShort(f"{segments[0].household_id}: no segment long enough for one window")
    return SampleSet.concat(parts)


def prepare_clients(
    readings: ReadingSet,
    weather: WeatherSeries,
    window: int = 48,
    horizon: int = 1,
    stride: int = 1,
    fractions=(0.8, 0.1, 0.1),
    gap_policy: str = "ffill",
) -> list[ClientData]:
    """Turn each household into a client with its own chronological splits.

    Client ids are assigned 0..m-1 in household-id order. Each client fits
    its scaler on its own training split only.
    """
    check_fractions(fractions)
    segments = join_weather(readings, weather, gap_policy=gap_policy)
    by_house: dict[str, list[AlignedSeries]] = {}
    for s in segments:
        by_house.setdefault(s.household_id, []).append(s)
    clients = []
    for cid, hid in enumerate(readings.household_ids):
        segs = by_house[hid]
        samples = household_samples(segs, window, horizon, stride)
        train, val, test = split_chronological(samples, fractions)
        scaler = fit_scaler(train)
        clients.append(
            ClientData(
                client_id=cid,
                household_id=hid,
                train=apply_scaler(scaler, train),
                val=apply_scaler(scaler, val),
                test=apply_scaler(scaler, test),
                scaler=scaler,
                filled_steps=int(sum(int(s.filled.sum()) for s in segs)),
            )
        )
    return clients


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SYNTH_START = parse_timestamp("2013-01-07T00:00:00Z")  # a Monday
_REGIMES = {"mixed": 0, "heating": 1, "flat": 2}
_WEATHER_STREAM = 0xFFFF


def _synthetic_weather(n_rows, seed, flat_temperature):
    ts = SYNTH_START + HALF_HOUR * np.arange(n_rows, dtype=np.int64)
    rng = _rng.derive_rng(seed, _rng.SYNTH, _WEATHER_STREAM)
    day = np.arange(n_rows) / 48.0
    hour = (np.arange(n_rows) % 48) / 2.0
    if flat_temperature is None:
        # annual minimum near the start date; daily swing peaks mid-afternoon
        temp = 11.0 - 7.0 * np.cos(2 * np.pi * (day + 6) / 365.0) \
            + 3.0 * np.cos(2 * np.pi * (hour - 15) / 24) + rng.normal(0.0, 1.0, n_rows)
    else:
        temp = np.full(n_rows, float(flat_temperature))
    hum = np.clip(75.0 - 10.0 * np.cos(2 * np.pi * (hour - 15) / 24) + rng.normal(0.0, 5.0, n_rows), 0.0, 100.0)
    return WeatherSeries(ts, temp, hum)


def _household_profile(rng, regime, heating_range):
    if regime == "heating":
        return dict(
            base=rng.uniform(0.3, 0.5),
            amp=rng.uniform(0.02, 0.05),
            weekend=rng.uniform(-0.02, 0.02),
            alpha=rng.uniform(0.2, 0.3),
        )
    if regime == "flat":
        return dict(
            base=rng.uniform(0.8, 1.2),
            amp=rng.uniform(0.02, 0.05),
            weekend=rng.uniform(-0.02, 0.02),
            alpha=0.0,
        )
    return dict(
        base=rng.uniform(0.3, 0.6),
        amp=rng.uniform(0.1, 0.25),
        weekend=rng.uniform(-0.05, 0.15),
        alpha=rng.uniform(*heating_range),
    )


def _daily_shape():
    hour = np.arange(48) / 2.0
    # second harmonic gives a morning peak (~08h) next to the evening one (~19-20h)
    return 0.5 * np.cos(2 * np.pi * (hour - 19) / 24) + 0.5 * np.cos(4 * np.pi * (hour - 8) / 24)


def generate_synthetic(
    n_households: int,
    n_days: int,
    seed: int,
    *,
    noise_std: float = 0.05,
    flat_temperature: float | None = None,
    heating_range=(0.01, 0.05),
    regime: str = "mixed",
    prefix: str = "H",
):
    """Deterministic artificial households plus the weather that drives them.

    kwh = base + amp*daily_shape(hour) + weekend_offset*is_weekend
          + alpha*max(0, 18 - temperature) + N(0, noise_std), clamped at 0.

    Household ``i`` draws its (base, amp, weekend_offset, alpha) and noise from
    a stream keyed by ``(seed, regime, i)``, so households differ from each
    other while sharing one weather series keyed by ``seed`` alone.
    """
    if n_households < 1 or n_days < 2:
        raise BadDimensions(f"need n_households >= 1 and n_days >= 2, got {n_households}, {n_days}")
    if regime not in _REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    n_rows = 48 * n_days
    weather = _synthetic_weather(n_rows, seed, flat_temperature)
    hod = np.arange(n_rows) % 48
    weekend = (day_of_week(weather.timestamps) >= 5).astype(np.float64)
    shape = _daily_shape()[hod]
    heat = np.maximum(0.0, 18.0 - weather.temperature_c)
    width = len(str(n_households - 1))
    rows = {}
    for i in range(n_households):
        rng = _rng.derive_rng(seed, _rng.SYNTH, _REGIMES[regime], i)
        p = _household_profile(rng, regime, heating_range)
        noise = rng.normal(0.0, 1.0, n_rows) * noise_std
        kwh = p["base"] + p["amp"] * shape + p["weekend"] * weekend + p["alpha"] * heat + noise
        rows[f"{prefix}{i:0{width}d}"] = (weather.timestamps, np.maximum(kwh, 0.0))
    return ReadingSet.from_arrays(rows), weather


def generate_regimes(n_per_regime: int, n_days: int, seed: int, noise_std: float = 0.05):
    """Two-regime population: heating-dominated ("A*") and flat-load ("B*") households.

    Returns ``(readings, weather, labels)`` with ``labels[household_id]`` 0 for
    heating and 1 for flat.
    """
    heat, weather = generate_synthetic(n_per_regime, n_days, seed, noise_std=noise_std, regime="heating", prefix="A")
    flat, _ = generate_synthetic(n_per_regime, n_days, seed, noise_std=noise_std, regime="flat", prefix="B")
    readings = heat.merge(flat)
    labels = {h: 0 for h in heat.household_ids} | {h: 1 for h in flat.household_ids}
    return readings, weather, labels
