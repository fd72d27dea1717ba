"""Signal tables, sliding windows, chronological splits and synthetic data."""
import csv
import hashlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .graph import RoadGraph


class SignalParseError(ValueError):
    pass


class SplitConfigError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


class WindowLengthError(ValueError):
    pass


@dataclass
class SignalTable:
    timestamps: list
    values: np.ndarray
    names: list
    frequency_minutes: int = 5
    missing: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != (len(self.timestamps), len(self.names)):
            raise SignalParseError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.names)} nodes")

    @property
    def shape(self):
        return self.values.shape


def load_signal_csv(path):
    """Parse ``timestamp,<name1>,...`` with ISO-8601 stamps; empty cells become 0."""
    path = Path(path)
    stamps, rows = [], []
    missing = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SignalParseError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip() != "timestamp":
            raise SignalParseError(f"{path}:1: header must be 'timestamp,<name1>,...'")
        names = [h.strip() for h in header[1:]]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SignalParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0].strip())
            except ValueError:
                raise SignalParseError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    missing += 1
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise SignalParseError(f"{path}:{lineno}: bad value {cell!r}") from None
            if stamps:
                step = ts - stamps[-1]
                if step <= timedelta(0):
                    raise SignalParseError(f"{path}:{lineno}: timestamp {row[0]!r} is not after the previous row")
                if len(stamps) >= 2 and step != stamps[1] - stamps[0]:
                    raise SignalParseError(f"{path}:{lineno}: inconsistent spacing {step}")
            stamps.append(ts)
            rows.append(vals)
    if not rows:
        raise SignalParseError(f"{path}: no data rows")
    freq = 5 if len(stamps) < 2 else int((stamps[1] - stamps[0]).total_seconds() // 60)
    return SignalTable(stamps, np.array(rows), names, frequency_minutes=freq, missing=missing)


def write_signal_csv(table, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + list(table.names))
        for ts, row in zip(table.timestamps, table.values):
            w.writerow([ts.isoformat()] + [repr(float(v)) for v in row])


@dataclass
class Scaler:
    """z-score transform with population statistics."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateDataError(f"scaler std must be positive, got {self.std}")

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse_transform(self, x):
        return x * self.std + self.mean


@dataclass
class WindowedDataset:
    """Sliding windows over one table.

    Sample ``i`` reads input rows ``[i, i+T)`` and target rows ``[i+T, i+T+T')``.
    Windows are materialized lazily by :meth:`batch`.
    """

    table: SignalTable
    input_window: int
    output_window: int
    time_of_day: bool = False
    splits: dict = field(default_factory=dict)
    scaler: Scaler = None
    source: str = ""

    @property
    def num_samples(self):
        return self.table.values.shape[0] - self.input_window - self.output_window + 1

    @property
    def num_nodes(self):
        return self.table.values.shape[1]

    @property
    def channels(self):
        return 2 if self.time_of_day else 1

    def last_input_row(self, i):
        return np.asarray(i) + self.input_window - 1

    def split(self, name):
        if name not in self.splits:
            raise SplitConfigError(f"dataset has no split {name!r}; available: {sorted(self.splits)}")
        return self.splits[name]

    def _tod(self):
        day = np.array([(ts.hour * 60 + ts.minute) * 60 + ts.second for ts in self.table.timestamps])
        return day / 86400.0

    def batch(self, indices, scaled=True):
        """Return ``(X, Y)``: inputs ``(B, T, N, C)`` and raw targets ``(B, T', N)``."""
        idx = np.asarray(indices, dtype=np.int64)
        T, Tp = self.input_window, self.output_window
        vals = self.table.values
        rows_in = idx[:, None] + np.arange(T)[None, :]
        rows_out = idx[:, None] + T + np.arange(Tp)[None, :]
        X = vals[rows_in]
        if scaled:
            if self.scaler is None:
                raise DegenerateDataError("dataset has no fitted scaler")
            X = self.scaler.transform(X)
        X = X[..., None]
        if self.time_of_day:
            tod = self._tod()[rows_in]
            X = np.concatenate([X, np.broadcast_to(tod[:, :, None, None], X.shape)], axis=-1)
        return np.ascontiguousarray(X), vals[rows_out]

    def split_hash(self):
        h = hashlib.sha256()
        for name in sorted(self.splits):
            h.update(name.encode())
            h.update(np.asarray(self.splits[name], dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def make_windows(table, input_window=12, output_window=12, time_of_day=False, source=""):
    S = table.values.shape[0]
    need = input_window + output_window
    if S < need:
        raise WindowLengthError(f"table has {S} rows; at least {need} are required for T={input_window}, T'={output_window}")
    return WindowedDataset(table, input_window, output_window, time_of_day=time_of_day, source=str(source))


def chronological_split(dataset, fractions=None, days=None):
    """Assign windows to train/val/test by the row of their last input step.

    ``fractions`` splits the window sequence proportionally; ``days`` places
    the boundaries at midnights counted from the first day of the table.
    Windows whose targets cross a boundary stay in the earlier split.
    """
    n = dataset.num_samples
    last = dataset.last_input_row(np.arange(n))
    if days is not None:
        if len(days) != 3 or any(d < 0 for d in days):
            raise SplitConfigError(f"day split needs three nonnegative counts, got {days}")
        stamps = dataset.table.timestamps
        origin = datetime.combine(stamps[0].date(), datetime.min.time(), tzinfo=stamps[0].tzinfo)
        span_days = (stamps[-1] - origin).total_seconds() / 86400.0
        if sum(days) > np.ceil(span_days + 1e-9):
            raise SplitConfigError(f"day split {days} exceeds the table span of {span_days:.2f} days")
        b1 = origin + timedelta(days=days[0])
        b2 = b1 + timedelta(days=days[1])
        row_b1 = int(np.searchsorted(np.array(stamps), b1))
        row_b2 = int(np.searchsorted(np.array(stamps), b2))
        groups = {
            "train": np.nonzero(last < row_b1)[0],
            "val": np.nonzero((last >= row_b1) & (last < row_b2))[0],
            "test": np.nonzero(last >= row_b2)[0],
        }
    else:
        fractions = (0.7, 0.1, 0.2) if fractions is None else tuple(float(f) for f in fractions)
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
            raise SplitConfigError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        order = np.arange(n)
        groups = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
                  "test": order[n_train + n_val:]}
    for name, idx in groups.items():
        if len(idx) == 0:
            raise SplitConfigError(f"split {name!r} is empty")
    return replace(dataset, splits=groups)


def fit_scaler(dataset, mask_zero=True):
    """Population mean/std over the rows read by training inputs, skipping zeros when masking."""
    train = dataset.split("train")
    end = int(train.max()) + dataset.input_window
    vals = dataset.table.values[:end].ravel()
    if mask_zero:
        vals = vals[vals != 0.0]
    if vals.size == 0:
        raise DegenerateDataError("training split has no observed entries")
    std = float(vals.std())
    if std == 0.0:
        raise DegenerateDataError("training data are constant; std is zero")
    return Scaler(float(vals.mean()), std)


def prepare_dataset(table, input_window=12, output_window=12, fractions=None, days=None,
                    time_of_day=False, mask_zero=True, source=""):
    """Window, split and scale in one go."""
    ds = make_windows(table, input_window, output_window, time_of_day, source)
    ds = chronological_split(ds, fractions=fractions, days=days)
    return replace(ds, scaler=fit_scaler(ds, mask_zero))


# ---------------------------------------------------------------------------
# synthetic data with time-varying correlation
# ---------------------------------------------------------------------------

@dataclass
class Regime:
    start: int
    stop: int
    groups: tuple


@dataclass
class SyntheticSpec:
    num_nodes: int = 8
    num_groups: int = 2
    length: int = 2000
    noise: float = 0.05
    seed: int = 0
    regime_length: int = 1000
    frequency_minutes: int = 5
    start: str = "2012-03-01T00:00:00"
    base: float = 60.0
    peak_depth: float = 15.0
    wave_amplitude: float = 4.0
    wave_period: int = 24
    regimes: list = None

    def __post_init__(self):
        if self.regimes is None:
            self.regimes = default_regimes(self.length, self.num_nodes, self.num_groups, self.regime_length)
        else:
            self.regimes = [r if isinstance(r, Regime) else Regime(*r) for r in self.regimes]
        pos = 0
        for r in self.regimes:
            if r.start != pos or r.stop <= r.start:
                raise SplitConfigError(f"regimes must tile [0, {self.length}) without gaps or overlap")
            if len(r.groups) != self.num_nodes or min(r.groups) < 0 or max(r.groups) >= self.num_groups:
                raise SplitConfigError(f"regime groups {r.groups} do not assign {self.num_nodes} nodes to {self.num_groups} groups")
            pos = r.stop
        if pos != self.length:
            raise SplitConfigError(f"regimes cover {pos} rows, expected {self.length}")

    _SCALARS = {"num_nodes": int, "num_groups": int, "length": int, "noise": float, "seed": int,
                "regime_length": int, "frequency_minutes": int, "start": str, "base": float,
                "peak_depth": float, "wave_amplitude": float, "wave_period": int}

    @classmethod
    def from_file(cls, path):
        kwargs = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise SplitConfigError(f"{path}:{lineno}: expected key=value")
            if key == "regimes":
                regs = []
                for chunk in value.split(";"):
                    a, b, g = chunk.split(":")
                    regs.append(Regime(int(a), int(b), tuple(int(x) for x in g.split(","))))
                kwargs["regimes"] = regs
            elif key in cls._SCALARS:
                kwargs[key] = cls._SCALARS[key](value)
            else:
                raise SplitConfigError(f"{path}:{lineno}: unknown synthetic key {key!r}")
        return cls(**kwargs)

    def to_text(self):
        lines = [f"{k}={getattr(self, k)}" for k in self._SCALARS]
        regs = ";".join(f"{r.start}:{r.stop}:{','.join(map(str, r.groups))}" for r in self.regimes)
        lines.append(f"regimes={regs}")
        return "\n".join(lines) + "\n"


def default_regimes(length, num_nodes, num_groups, regime_length):
    """Alternate a blocked partition with an interleaved one every ``regime_length`` rows."""
    blocked = tuple(i * num_groups // num_nodes for i in range(num_nodes))
    interleaved = tuple(i % num_groups for i in range(num_nodes))
    out, start, k = [], 0, 0
    while start < length:
        stop = min(length, start + regime_length)
        out.append(Regime(start, stop, blocked if k % 2 == 0 else interleaved))
        start, k = stop, k + 1
    return out


def _group_trajectories(spec, t):
    """Daily slowdowns plus a sinusoid of group-specific period and phase."""
    rng = np.random.default_rng([spec.seed, 1])
    steps_per_day = 24 * 60 // spec.frequency_minutes
    hour = (t % steps_per_day) * 24.0 / steps_per_day
    out = []
    for g in range(spec.num_groups):
        # morning and evening slowdowns, shifted per group
        shift = 1.5 * g
        dip = (np.exp(-0.5 * ((hour - 8.0 - shift) / 1.2) ** 2)
               + 0.7 * np.exp(-0.5 * ((hour - 17.5 + shift) / 1.5) ** 2))
        period = spec.wave_period * (1.0 + 0.5 * g / max(1, spec.num_groups - 1))
        period *= rng.uniform(0.9, 1.1)
        wave = np.sin(2.0 * np.pi * t / period + rng.uniform(0.0, 2.0 * np.pi))
        out.append(spec.base - spec.peak_depth * dip + spec.wave_amplitude * wave)
    return np.stack(out)


def generate_synthetic(spec):
    """Return ``(table, groups)`` where ``groups[t, i]`` is node i's group at row t."""
    rng = np.random.default_rng([spec.seed, 0])
    t = np.arange(spec.length)
    latent = _group_trajectories(spec, t)
    groups = np.empty((spec.length, spec.num_nodes), dtype=np.int64)
    for r in spec.regimes:
        groups[r.start:r.stop] = np.asarray(r.groups)[None, :]
    values = latent[groups, t[:, None]]
    if spec.noise > 0:
        values = values + rng.normal(scale=spec.noise, size=values.shape)
    origin = datetime.fromisoformat(spec.start)
    step = timedelta(minutes=spec.frequency_minutes)
    stamps = [origin + i * step for i in range(spec.length)]
    names = [f"s{i}" for i in range(spec.num_nodes)]
    return SignalTable(stamps, values, names, frequency_minutes=spec.frequency_minutes), groups


def synthetic_graph(names):
    """A directed ring road through the nodes in index order."""
    n = len(names)
    A = np.zeros((n, n))
    for i in range(n):
        A[i, (i + 1) % n] = 1.0
    return RoadGraph(A, names=list(names))
