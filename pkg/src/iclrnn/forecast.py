"""Minute-resolution irradiance forecasting pipeline.

CSV input schema (header names; units are declared, not converted)::

    timestamp           ISO-8601, strictly increasing, minute resolution
    irradiance          W/m^2 (global horizontal, >= 0)
    humidity            %
    module_temperature  degC
    wind_speed          m/s
    wind_direction      degrees

The target is irradiance one minute after the end of each look-back
window. Splits are chronological and a window belongs to a split only if
every timestamp it touches (features and target) lies inside it.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ParameterError, ParseError, SchemaError
from .model import ConstraintMode, NetConfig, forward
from .training import AdamState, Scaler, train

FEATURES = ("irradiance", "humidity", "module_temperature", "wind_speed", "wind_direction")
DEFAULT_UNITS = {
    "irradiance": "W/m^2",
    "humidity": "%",
    "module_temperature": "degC",
    "wind_speed": "m/s",
    "wind_direction": "deg",
}
TIMESTAMP = "timestamp"
MAX_FILL = np.timedelta64(5, "m")


@dataclass
class TimeSeriesFrame:
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    values: np.ndarray  # (rows, 5) in FEATURES order
    units: dict = field(default_factory=lambda: dict(DEFAULT_UNITS))
    dropped_rows: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.timestamps)

    def column(self, name):
        return self.values[:, FEATURES.index(name)]

    def to_csv(self, path):
        df = pd.DataFrame(self.values, columns=FEATURES)
        df.insert(0, TIMESTAMP, pd.to_datetime(self.timestamps).strftime("%Y-%m-%dT%H:%M:%S"))
        df.to_csv(path, index=False, float_format="%.10g")


def _fill_or_drop(ts, col):
    """Forward-fill NaN runs spanning <= 5 minutes after a valid value; flag the rest."""
    col = col.copy()
    drop = np.zeros(len(col), dtype=bool)
    isnan = np.isnan(col)
    i = 0
    while i < len(col):
        if not isnan[i]:
            i += 1
            continue
        j = i
        while j < len(col) and isnan[j]:
            j += 1
        if i > 0 and ts[j - 1] - ts[i - 1] <= MAX_FILL:
            col[i:j] = col[i - 1]
        else:
            drop[i:j] = True
        i = j
    return col, drop


def load_csv(path, columns=FEATURES, units=None):
    """Read a sensor CSV, validate its schema and apply the missing-value policy.

    Raises :class:`SchemaError` naming a missing column and
    :class:`ParseError` with the 1-based file line of a bad timestamp.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    for name in (TIMESTAMP, *columns):
        if name not in df.columns:
            raise SchemaError(f"missing required column {name!r} in {path}")
    ts = pd.to_datetime(df[TIMESTAMP], errors="coerce", format="ISO8601")
    bad = np.nonzero(ts.isna().to_numpy())[0]
    if len(bad):
        raise ParseError(f"unparseable timestamp {df[TIMESTAMP].iloc[bad[0]]!r} at line {bad[0] + 2}",
                         line=int(bad[0] + 2))
    ts = ts.to_numpy().astype("datetime64[s]")
    if len(ts) > 1 and np.any(np.diff(ts) <= np.timedelta64(0, "s")):
        k = int(np.nonzero(np.diff(ts) <= np.timedelta64(0, "s"))[0][0]) + 1
        raise ParseError(f"timestamps not strictly increasing at line {k + 2}", line=k + 2)
    cols = []
    drop = np.zeros(len(ts), dtype=bool)
    for name in columns:
        raw = pd.to_numeric(df[name].replace("", np.nan), errors="coerce").to_numpy(dtype=np.float64)
        filled, d = _fill_or_drop(ts, raw)
        cols.append(filled)
        drop |= d
    values = np.column_stack(cols) if cols else np.empty((len(ts), 0))
    keep = ~drop
    frame_units = dict(DEFAULT_UNITS)
    frame_units.update(units or {})
    irr = values[keep, 0]
    if np.any(irr < 0):
        raise ParseError("irradiance must be non-negative")
    return TimeSeriesFrame(ts[keep], values[keep], frame_units, int(drop.sum()))


@dataclass
class ForecastDataset:
    lookback: int
    windows: np.ndarray  # (M, L, 5) raw features
    targets: np.ndarray  # (M, 1) raw irradiance one minute ahead
    start_times: np.ndarray  # first feature timestamp of each window
    target_times: np.ndarray
    scaler: Scaler = None
    train_index: np.ndarray = None
    val_index: np.ndarray = None
    test_index: np.ndarray = None
    boundaries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def normalized(self, index):
        return self.scaler.normalize_x(self.windows[index]), self.scaler.normalize_y(self.targets[index])


def windowize(frame, lookback=10, horizon=1, max_gap_minutes=1.0):
    """Sliding windows of ``lookback`` rows predicting irradiance ``horizon`` rows later.

    Windows touching a timestamp step larger than ``max_gap_minutes`` are
    excluded. With no gaps and ``horizon == 1`` there are ``rows - lookback``
    windows.
    """
    L = int(lookback)
    if L < 1 or horizon != 1:
        raise ParameterError("lookback must be >= 1 and only one-step horizons are supported")
    n = len(frame)
    if n <= L:
        raise ParameterError(f"need more than {L} rows, got {n}")
    m = n - L
    gap = np.diff(frame.timestamps) > np.timedelta64(int(round(max_gap_minutes * 60)), "s")
    # a window over rows [i, i + L] crosses steps i .. i + L - 1
    csum = np.concatenate([[0], np.cumsum(gap)])
    ok = (csum[L:L + m] - csum[:m]) == 0
    starts = np.nonzero(ok)[0]
    idx = starts[:, None] + np.arange(L)[None, :]
    return ForecastDataset(
        L,
        frame.values[idx],
        frame.values[starts + L, 0][:, None],
        frame.timestamps[starts],
        frame.timestamps[starts + L],
    )


def split_chronological(ds, train_end, val_end):
    """Assign windows to train / validation / test by date boundaries and fit the scaler on train.

    A window is in a split only if its first feature timestamp and its
    target timestamp both lie in ``[split_start, split_end)``.
    """
    train_end = np.datetime64(train_end, "s")
    val_end = np.datetime64(val_end, "s")
    if not train_end < val_end:
        raise ParameterError("train_end must precede val_end")
    s, t = ds.start_times, ds.target_times
    ds.train_index = np.nonzero(t < train_end)[0]
    ds.val_index = np.nonzero((s >= train_end) & (t < val_end))[0]
    ds.test_index = np.nonzero(s >= val_end)[0]
    if len(ds.train_index) == 0:
        raise ParameterError("empty training split")
    ds.boundaries = {"train_end": str(train_end), "val_end": str(val_end)}
    ds.scaler = Scaler.fit(ds.windows[ds.train_index], ds.targets[ds.train_index])
    return ds


def split_by_fraction(ds, train=0.7, val=0.15):
    """Date boundaries at the given fractions of the covered time span."""
    t0, t1 = ds.start_times[0], ds.target_times[-1]
    span = (t1 - t0).astype(np.int64)
    b1 = t0 + np.timedelta64(int(span * train), "s")
    b2 = t0 + np.timedelta64(int(span * (train + val)), "s")
    return split_chronological(ds, b1, b2)


def leakage_scan(ds):
    """Count test windows whose features start before the test boundary, and
    train windows whose target reaches past the training boundary."""
    train_end = np.datetime64(ds.boundaries["train_end"])
    val_end = np.datetime64(ds.boundaries["val_end"])
    test_leaks = int(np.sum(ds.start_times[ds.test_index] < val_end))
    train_leaks = int(np.sum(ds.target_times[ds.train_index] >= train_end))
    overlap = len(np.intersect1d(ds.train_index, ds.test_index)) + len(np.intersect1d(ds.val_index, ds.test_index))
    return {"test_windows_before_boundary": test_leaks, "train_targets_after_boundary": train_leaks,
            "shared_windows": overlap, "leaks": test_leaks + train_leaks + overlap}


def synth_generate(days, rng=None, seed=0, start="2023-01-01", amplitude=1000.0, sunrise_hour=6.0,
                   daylight_hours=12.0, clear_day_prob=0.3, dropout_rate=6.0, noise_std=15.0,
                   ramp_minutes=(5, 15)):
    """Synthetic solar-site data: half-sine clear sky, cloud dropouts, sensor noise.

    ``dropout_rate`` is the mean number of cloud events per cloudy day; each
    event fades in and out over a ramp drawn from ``ramp_minutes``.
    Night-time irradiance is exactly zero. ``meta["clear_days"]`` lists the
    indices of cloud-free days.
    """
    if days < 1:
        raise ParameterError("days must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed)) if rng is None else rng
    n = int(days) * 1440
    minutes = np.arange(n)
    tod = (minutes % 1440) / 60.0
    phase = (tod - sunrise_hour) / daylight_hours
    day = (phase > 0) & (phase < 1)
    clear = np.where(day, amplitude * np.sin(np.pi * np.clip(phase, 0, 1)), 0.0)
    cloud = np.ones(n)
    clear_days = []
    for d in range(int(days)):
        if rng.uniform() < clear_day_prob:
            clear_days.append(d)
            continue
        for _ in range(rng.poisson(dropout_rate)):
            t0 = d * 1440 + int(rng.uniform(sunrise_hour, sunrise_hour + daylight_hours) * 60)
            dur = int(rng.integers(5, 61))
            ramp = int(rng.integers(ramp_minutes[0], ramp_minutes[1] + 1))
            depth = rng.uniform(0.2, 0.7)
            # trapezoid: fade in over `ramp` minutes, hold `dur`, fade out
            k = np.arange(dur + 2 * ramp)
            shade = np.minimum(1.0, np.minimum(k + 1, dur + 2 * ramp - k) / (ramp + 1))
            seg = slice(t0, min(t0 + len(k), n))
            cloud[seg] = np.minimum(cloud[seg], 1.0 - (1.0 - depth) * shade[:seg.stop - seg.start])
    irr = clear * cloud + day * rng.normal(0.0, noise_std, n)
    irr = np.where(day, np.maximum(irr, 0.0), 0.0)
    frac = irr / amplitude
    humidity = np.clip(85.0 - 30.0 * frac + rng.normal(0.0, 1.5, n), 0.0, 100.0)
    kernel = np.exp(-np.arange(60) / 20.0)
    kernel /= kernel.sum()
    heat = np.convolve(frac, kernel)[:n]
    temp = 26.0 + 30.0 * heat + rng.normal(0.0, 0.3, n)
    wind = np.empty(n)
    w = 2.0
    shocks = rng.normal(0.0, 0.15, n)
    for i in range(n):
        w = 0.98 * w + 0.02 * (1.5 + 2.0 * frac[i]) + shocks[i]
        wind[i] = abs(w)
    direction = np.mod(180.0 + np.cumsum(rng.normal(0.0, 2.0, n)), 360.0)
    ts = np.datetime64(start, "m") + minutes.astype("timedelta64[m]")
    values = np.column_stack([irr, humidity, temp, wind, direction])
    return TimeSeriesFrame(ts.astype("datetime64[s]"), values, dict(DEFAULT_UNITS), 0,
                           {"clear_days": clear_days, "amplitude": amplitude, "days": int(days)})


def persistence_predictor(windows):
    return np.asarray(windows)[:, -1, 0]


def evaluate_forecast(predictor, ds, index=None):
    """Test-split metrics in raw units against the persistence baseline.

    ``predictor`` maps raw windows ``(M, L, 5)`` to predicted irradiance ``(M,)``.
    """
    index = ds.test_index if index is None else index
    if index is None or len(index) == 0:
        raise ParameterError("empty test split")
    y = ds.targets[index, 0]
    pred = np.asarray(predictor(ds.windows[index]), dtype=np.float64).reshape(-1)
    pers = persistence_predictor(ds.windows[index])
    mse = float(np.mean((pred - y) ** 2))
    mse_p = float(np.mean((pers - y) ** 2))
    return {
        "mse": mse,
        "mae": float(np.mean(np.abs(pred - y))),
        "persistence_mse": mse_p,
        "skill": 1.0 - mse / mse_p if mse_p > 0 else float("nan"),
        "test_windows": int(len(index)),
    }


def flatten_windows(windows):
    """``(M, L, 5)`` -> ``(M, 5 L)``, row-major: minute by minute, features within a minute."""
    windows = np.asarray(windows, dtype=np.float64)
    return windows.reshape(len(windows), -1)


def forecast_net_config(lookback, hidden_dims=(32, 32), constraint_mode=ConstraintMode.CONVEX_LIPSCHITZ, seed=0):
    """The forecaster sees the flattened window as one vector and emits one step."""
    return NetConfig(len(FEATURES) * int(lookback), 1, hidden_dims=tuple(hidden_dims), rollout_steps=1,
                     constraint_mode=ConstraintMode(constraint_mode), seed=seed)


def train_forecaster(ds, cfg, epochs=15, batch_size=64, lr=3e-3, lr_decay=0.85, seed=None, callback=None):
    """Fit on the training split, tracking MSE on the validation split.

    Requires a split dataset (see :func:`split_chronological`). Returns the
    :class:`TrainResult` of :func:`train`.
    """
    if ds.scaler is None or ds.train_index is None:
        raise ParameterError("dataset must be split before training")
    if cfg.input_dim != len(FEATURES) * ds.lookback or cfg.output_dim != 1:
        raise ParameterError(f"network shape does not match lookback {ds.lookback}")
    x, y = ds.normalized(ds.train_index)
    validation = None
    if len(ds.val_index):
        xv, yv = ds.normalized(ds.val_index)
        validation = (flatten_windows(xv), yv)
    return train(flatten_windows(x), y, cfg, AdamState(lr=lr), epochs=epochs, batch_size=batch_size,
                 seed=seed, callback=callback, lr_decay=lr_decay, validation=validation)


def forecast_predictor(params, cfg, scaler):
    """Callable mapping raw windows ``(M, L, 5)`` to predicted irradiance ``(M,)``."""

    def predict(windows):
        z = flatten_windows(scaler.normalize_x(windows))
        return scaler.denormalize_y(forward(params, cfg, z)[:, -1])[:, 0]

    return predict
