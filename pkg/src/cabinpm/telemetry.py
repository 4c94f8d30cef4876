"""Telemetry data model, canonical CSV I/O, and the synthetic generator.

One frame is a single 1 Hz reading of all 19 sensor channels: cabin
environment (pressure, temperature, humidity, CO2), inertial channels
(acceleration, magnetic field), cumulative particle counts per 0.1 liter
for six size thresholds, and mass concentration for three PM classes.
Missing values are NaN in memory and empty cells in CSV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import DataError, SchemaError

# Channel order is the canonical CSV column order (after timestamp_s).
CHANNELS = (
    "pressure_hpa",
    "temp_c",
    "rh_pct",
    "co2_ppm",
    "accel_x_g",
    "accel_y_g",
    "accel_z_g",
    "mag_x_ut",
    "mag_y_ut",
    "mag_z_ut",
    "pc0_3",
    "pc0_5",
    "pc1_0",
    "pc2_5",
    "pc5_0",
    "pc10_0",
    "pm1_ugm3",
    "pm2_5_ugm3",
    "pm10_ugm3",
)

COUNT_CHANNELS = ("pc0_3", "pc0_5", "pc1_0", "pc2_5", "pc5_0", "pc10_0")
MASS_CHANNELS = ("pm1_ugm3", "pm2_5_ugm3", "pm10_ugm3")

CSV_HEADER = ("timestamp_s",) + CHANNELS


@dataclass(frozen=True)
class TelemetryFrame:
    """One timestamped reading of all sensor channels.

    Counts are cumulative "particles larger than" per 0.1 liter, so they
    are monotone non-increasing across the size ladder.
    """

    timestamp_s: int
    pressure_hpa: float
    temp_c: float
    rh_pct: float
    co2_ppm: float
    accel_g: np.ndarray       # (3,)
    mag_ut: np.ndarray        # (3,)
    particle_counts: np.ndarray  # (6,) for >0.3, >0.5, >1.0, >2.5, >5.0, >10 um
    pm_mass_ugm3: np.ndarray  # (3,) for PM1.0, PM2.5, PM10

    def channel_values(self) -> np.ndarray:
        """All 19 channels as one vector in canonical order."""
        return np.concatenate(
            [
                [self.pressure_hpa, self.temp_c, self.rh_pct, self.co2_ppm],
                self.accel_g,
                self.mag_ut,
                self.particle_counts,
                self.pm_mass_ugm3,
            ]
        ).astype(np.float64)

    @classmethod
    def from_channel_values(cls, timestamp_s: int, values: Sequence[float]) -> "TelemetryFrame":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (len(CHANNELS),):
            raise DataError(f"expected {len(CHANNELS)} channel values, got {v.shape}")
        return cls(
            timestamp_s=int(timestamp_s),
            pressure_hpa=float(v[0]),
            temp_c=float(v[1]),
            rh_pct=float(v[2]),
            co2_ppm=float(v[3]),
            accel_g=v[4:7].copy(),
            mag_ut=v[7:10].copy(),
            particle_counts=v[10:16].copy(),
            pm_mass_ugm3=v[16:19].copy(),
        )

    def ladder_ok(self) -> bool:
        """Size-ladder monotonicity of the cumulative counts."""
        c = self.particle_counts
        if np.isnan(c).any():
            return True
        return bool(np.all(np.diff(c) <= 0) and np.all(c >= 0))


@dataclass(frozen=True)
class TimeSeriesSegment:
    """A gap-free 1 Hz run: values[i] is the frame at start_s + i."""

    start_s: int
    values: np.ndarray  # (L, len(CHANNELS))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_s + np.arange(len(self), dtype=np.int64)


def frames_to_arrays(frames: Sequence[TelemetryFrame]) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps (N,), values (N, 19)) in frame order."""
    ts = np.array([f.timestamp_s for f in frames], dtype=np.int64)
    if not frames:
        return ts, np.empty((0, len(CHANNELS)))
    vals = np.stack([f.channel_values() for f in frames])
    return ts, vals


def arrays_to_frames(ts: np.ndarray, values: np.ndarray) -> list[TelemetryFrame]:
    return [TelemetryFrame.from_channel_values(int(t), row) for t, row in zip(ts, values)]


# ---------------------------------------------------------------------------
# CSV I/O


def _format_cell(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)  # shortest round-trip decimal


def write_csv(frames: Sequence[TelemetryFrame], path) -> None:
    """Write frames in the canonical schema; NaN becomes an empty cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for f in frames:
            cells = [str(f.timestamp_s)] + [_format_cell(v) for v in f.channel_values()]
            fh.write(",".join(cells) + "\n")


def read_csv(path) -> list[TelemetryFrame]:
    """Read a canonical telemetry CSV.

    Empty or unparsable numeric cells become NaN; rows whose timestamp
    does not parse are dropped. A timestamp that decreases relative to
    the previous row is an error (duplicates are allowed; preprocessing
    averages them).
    """
    frames: list[TelemetryFrame] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: missing header row")
        if tuple(header) != CSV_HEADER:
            for i, (got, want) in enumerate(zip(header, CSV_HEADER)):
                if got != want:
                    raise SchemaError(f"column {i}: expected {want!r}, found {got!r}")
            raise SchemaError(
                f"expected {len(CSV_HEADER)} columns, found {len(header)}"
            )
        prev_ts = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise SchemaError(f"line {lineno}: expected {len(CSV_HEADER)} cells, found {len(row)}")
            try:
                ts = int(row[0])
            except ValueError:
                continue  # unparsable timestamp: row rejected
            if prev_ts is not None and ts < prev_ts:
                raise DataError(f"line {lineno}: timestamp {ts} decreases (previous {prev_ts})")
            prev_ts = ts
            vals = np.empty(len(CHANNELS))
            for i, cell in enumerate(row[1:]):
                try:
                    vals[i] = float(cell) if cell != "" else math.nan
                except ValueError:
                    vals[i] = math.nan
            frames.append(TelemetryFrame.from_channel_values(ts, vals))
    return frames


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    """Seeded synthetic cabin telemetry.

    Channel baselines (pressure 1013 hPa, temp 23 C, rh 40 %, CO2
    2500 ppm, field magnitude ~40 uT) are plausible cabin fixtures, not
    measured truth. Particle bursts follow acceleration spikes with
    elevated probability inside a 60 s coupling window; that coupling is
    the signal the forecaster is meant to exploit.
    """

    seed: int = 0
    duration_s: int = 3600
    orbital_period_s: int = 5400
    event_rate_per_hour: float = 3.0           # acceleration spike rate
    accel_resuspension_gain: float = 1.0       # spike -> particle burst coupling
    crew_co2_gain: float = 1.0                 # crew-activity square wave amplitude scale
    noise_pressure_hpa: float = 0.05
    noise_temp_c: float = 0.05
    noise_rh_pct: float = 0.3
    noise_co2_ppm: float = 10.0
    noise_accel_g: float = 0.02
    noise_mag_ut: float = 0.2
    spike_amplitude_g: float = 0.05            # accel disturbance peak scale
    spike_decay_s: float = 60.0
    burst_amplitude: float = 400.0             # mean pc0_3 injection per burst
    burst_decay_s: float = 60.0
    duplicate_rate_per_hour: float = 0.0       # emit duplicate-timestamp rows

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise DataError("duration_s must be positive")
        if self.orbital_period_s <= 0:
            raise DataError("orbital_period_s must be positive")
        if self.event_rate_per_hour < 0:
            raise DataError("event_rate_per_hour must be non-negative")


# Cumulative "larger than" fractions down the size ladder: one burst state
# scaled by a fixed decreasing profile keeps the ladder monotone.
_LADDER = np.array([1.0, 0.60, 0.35, 0.15, 0.06, 0.02])

# Fixed linear count->mass map (coefficients on pc0_3); documented fixture,
# chosen so a typical burst pushes PM2.5 mass well past 35 ug/m3.
_MASS_COEF = np.array([0.05, 0.15, 0.18])

_BURST_FLOOR = 1.0  # counts below this decay to exactly zero


def generate_synthetic(cfg: SynthConfig) -> list[TelemetryFrame]:
    """Deterministic 1 Hz synthetic telemetry for cfg.duration_s seconds."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.duration_s
    t = np.arange(n, dtype=np.float64)
    w = 2.0 * math.pi / cfg.orbital_period_s

    pressure = 1013.0 + cfg.noise_pressure_hpa * rng.standard_normal(n)
    temp = 23.0 + 0.4 * np.sin(w * t) + cfg.noise_temp_c * rng.standard_normal(n)
    rh = np.clip(40.0 + cfg.noise_rh_pct * rng.standard_normal(n), 0.0, 100.0)

    # Crew activity: 1 h on / 1 h off square wave on CO2.
    crew = (t % 7200.0) < 3600.0
    co2 = 2500.0 + 300.0 * cfg.crew_co2_gain * crew + cfg.noise_co2_ppm * rng.standard_normal(n)

    # Magnetic field: orbital-period sinusoids with fixed phases per axis.
    mag = np.stack(
        [
            25.0 * np.sin(w * t),
            25.0 * np.cos(w * t),
            20.0 * np.sin(w * t + 1.0),
        ],
        axis=1,
    )
    mag += cfg.noise_mag_ut * rng.standard_normal((n, 3))

    # Acceleration spikes: per-second Poisson events with an exponential
    # tail, concentrated in crew-active hours (crew_co2_gain > 0 couples
    # activity to disturbances). The peak stays a few noise sigma high so
    # the disturbance survives downstream robust-z outlier screening.
    spike_p = cfg.event_rate_per_hour / 3600.0
    if cfg.crew_co2_gain > 0.0:
        spike_rate = np.where(crew, 1.8 * spike_p, 0.2 * spike_p)
    else:
        spike_rate = np.full(n, spike_p)
    spikes = rng.random(n) < spike_rate
    spike_amp = np.where(
        spikes,
        cfg.spike_amplitude_g * (0.5 + np.minimum(rng.exponential(0.5, n), 1.0)),
        0.0,
    )
    # Structural disturbances shake the whole rack: each event hits all
    # three axes, scaled by a per-axis random sign and magnitude.
    spike_decay = math.exp(-1.0 / cfg.spike_decay_s)
    accel = cfg.noise_accel_g * rng.standard_normal((n, 3))
    axis_scale = rng.uniform(0.6, 1.0, (n, 3))
    for ax in range(3):
        accel[:, ax] += lfilter([1.0], [1.0, -spike_decay], spike_amp * axis_scale[:, ax])

    # Particle bursts: elevated trigger probability within 60 s after a
    # spike, with injection size proportional to the causing spike's
    # amplitude so the acceleration trace determines the decay envelope.
    last_spike = np.maximum.accumulate(np.where(spikes, np.arange(n), -1))
    since_spike = np.where(last_spike >= 0, np.arange(n) - last_spike, n)
    in_window = since_spike < 60
    p_trigger = np.where(in_window, 0.08 * cfg.accel_resuspension_gain, spike_p * 0.1)
    triggers = rng.random(n) < p_trigger
    if cfg.spike_amplitude_g > 0.0:
        amp_ratio = np.where(
            last_spike >= 0,
            spike_amp[np.maximum(last_spike, 0)] / cfg.spike_amplitude_g,
            0.0,
        )
    else:
        amp_ratio = np.zeros(n)
    inj_size = np.where(in_window, amp_ratio, 0.5 + np.minimum(rng.exponential(0.5, n), 1.0))
    inj_counts = np.where(triggers, cfg.burst_amplitude * inj_size, 0.0)
    decay = math.exp(-1.0 / cfg.burst_decay_s)
    burst = lfilter([1.0], [1.0, -decay], inj_counts)
    burst[burst < _BURST_FLOOR] = 0.0

    counts = burst[:, None] * _LADDER[None, :]
    mass = burst[:, None] * _MASS_COEF[None, :]

    values = np.column_stack([pressure, temp, rh, co2, accel, mag, counts, mass])
    ts = np.arange(n, dtype=np.int64)
    frames = arrays_to_frames(ts, values)

    if cfg.duplicate_rate_per_hour > 0.0:
        dup_p = cfg.duplicate_rate_per_hour / 3600.0
        dup_mask = rng.random(n) < dup_p
        out: list[TelemetryFrame] = []
        for i, f in enumerate(frames):
            out.append(f)
            if dup_mask[i]:
                # Jitter environment channels only; counts must keep the ladder.
                jitter = f.channel_values().copy()
                jitter[:10] *= 1.0 + 1e-3 * rng.standard_normal(10)
                out.append(TelemetryFrame.from_channel_values(f.timestamp_s, jitter))
        frames = out
    return frames
