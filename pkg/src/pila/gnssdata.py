"""Synthetic daily GNSS displacement series and a loader for real ones.

A station's displacement along one direction decomposes additively into a
linear trend (tectonic motion), annual and semiannual seasonality
(hydrological loading), a transient deformation driven by the source's
volume-change history through the deformation model, and pink plus white
noise. The generator stores that decomposition next to the observations so
recovery experiments have exact ground truth.
"""

from __future__ import annotations

import csv
import datetime
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import mogi
from .rng import substream

ANNUAL_PERIOD_DAYS = 365.25
SEMIANNUAL_PERIOD_DAYS = 182.625

DIRECTIONS = ("east_mm", "north_mm", "up_mm")


@dataclass(frozen=True)
class VolumeProfile:
    """Volume-change history (m^3): logistic ramp plus slow linear relaxation.

    The ramp rises from ~0 to ``total_m3`` across the event window with time
    constant duration/8, so it is <2% of total at the window start and >98%
    at the end; afterwards the volume relaxes by ``relax_per_day * total_m3``
    per day.
    """

    t_start: float
    duration_days: float
    total_m3: float
    relax_per_day: float = 0.0

    def __post_init__(self):
        if self.duration_days <= 0:
            raise ValueError(f"duration must be positive, got {self.duration_days}")

    def values(self, days) -> np.ndarray:
        t = np.asarray(days, dtype=np.float64)
        mid = self.t_start + self.duration_days / 2.0
        tau = self.duration_days / 8.0
        ramp = self.total_m3 / (1.0 + np.exp(-(t - mid) / tau))
        t_end = self.t_start + self.duration_days
        relax = self.relax_per_day * self.total_m3 * np.maximum(0.0, t - t_end)
        return ramp - relax


def volume_profile_ramp(t_start, duration_days, total_m3, relax_per_day=0.0) -> VolumeProfile:
    return VolumeProfile(t_start, duration_days, total_m3, relax_per_day)


@dataclass(frozen=True)
class TrajectoryParams:
    """Per-dimension trend and seasonal coefficients, east/north/vertical flattening.

    Arrays have length 3 * n_stations. Displacement of dimension j at day t:
    q[j] + m[j]*t + a1[j]*sin(2 pi t/T1) + b1[j]*cos(2 pi t/T1)
    + a2[j]*sin(2 pi t/T2) + b2[j]*cos(2 pi t/T2).
    """

    q: np.ndarray
    m: np.ndarray
    a1: np.ndarray
    b1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray
    t1_days: float = ANNUAL_PERIOD_DAYS
    t2_days: float = SEMIANNUAL_PERIOD_DAYS

    def __post_init__(self):
        if self.t1_days <= 0 or self.t2_days <= 0:
            raise ValueError("seasonal periods must be positive")
        n = self.q.shape[0]
        for name in ("m", "a1", "b1", "a2", "b2"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"trajectory arrays must share shape ({n},)")

    @classmethod
    def zeros(cls, n_obs: int) -> "TrajectoryParams":
        z = np.zeros(n_obs)
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def draw(cls, rng: np.random.Generator, n_obs: int,
             annual_mm=(2.0, 6.0), semiannual_mm=(1.0, 2.0),
             trend_mm_per_yr=5.0, intercept_mm=2.0,
             station_jitter=0.25, local_fraction=0.6,
             vertical_offset_mm=0.0) -> "TrajectoryParams":
        """Draw seasonal/trend coefficients at geodetic scales.

        Each component mixes a regional part (hydrological loading and plate
        motion are coherent across a local network: shared phase, one
        amplitude/trend per direction, bounded per-station jitter) with a
        station-local part (monument and bedrock effects: independent phase
        and amplitude per dimension, scaled by ``local_fraction``).
        """
        if n_obs % 3 != 0:
            raise ValueError("observation dimension must be 3 * n_stations")
        n_sta = n_obs // 3

        def regional(lo, hi):
            per_direction = rng.uniform(lo, hi, size=3) * rng.choice([-1.0, 1.0], size=3)
            jitter = 1.0 + rng.uniform(-station_jitter, station_jitter, size=n_obs)
            return np.repeat(per_direction, n_sta) * jitter

        def seasonal_coeffs(lo, hi):
            shared_phase = rng.uniform(0.0, 2.0 * math.pi)
            amp = regional(lo, hi)
            local_amp = rng.uniform(lo, hi, size=n_obs) * local_fraction
            local_phase = rng.uniform(0.0, 2.0 * math.pi, size=n_obs)
            a = amp * math.cos(shared_phase) + local_amp * np.cos(local_phase)
            b = amp * math.sin(shared_phase) + local_amp * np.sin(local_phase)
            return a, b

        a1, b1 = seasonal_coeffs(*annual_mm)
        a2, b2 = seasonal_coeffs(*semiannual_mm)
        trend_dir = rng.uniform(-trend_mm_per_yr, trend_mm_per_yr, size=3)
        jitter = 1.0 + rng.uniform(-station_jitter, station_jitter, size=n_obs)
        local_trend = rng.uniform(-trend_mm_per_yr, trend_mm_per_yr, size=n_obs) * local_fraction
        trend = (np.repeat(trend_dir, n_sta) * jitter + local_trend) / ANNUAL_PERIOD_DAYS
        q = rng.uniform(-intercept_mm, intercept_mm, size=n_obs)
        if vertical_offset_mm:
            # common vertical datum offset: positions are relative to an
            # arbitrary reference, so the vertical block need not be centered
            q[2 * n_sta:] += vertical_offset_mm
        return cls(
            q=q,
            m=trend,
            a1=a1,
            b1=b1,
            a2=a2,
            b2=b2,
        )

    def evaluate(self, days) -> np.ndarray:
        """Trend-plus-seasonal values, shape (n_days, 3 * n_stations)."""
        t = np.asarray(days, dtype=np.float64)[:, None]
        w1 = 2.0 * math.pi / self.t1_days
        w2 = 2.0 * math.pi / self.t2_days
        return (
            self.q[None, :]
            + self.m[None, :] * t
            + self.a1[None, :] * np.sin(w1 * t)
            + self.b1[None, :] * np.cos(w1 * t)
            + self.a2[None, :] * np.sin(w2 * t)
            + self.b2[None, :] * np.cos(w2 * t)
        )


@dataclass(frozen=True)
class SyntheticScenario:
    """Everything needed to generate one synthetic dataset deterministically."""

    geometry: mogi.StationGeometry
    source_xm_km: float
    source_ym_km: float
    source_depth_km: float
    profile: VolumeProfile
    trajectory: TrajectoryParams
    white_mm: float
    pink_mm: float
    seed: int
    span_days: int
    event_window: tuple
    start_date: datetime.date = datetime.date(2006, 1, 1)
    nu: float = 0.25
    bounds: mogi.VariableBounds = field(default_factory=mogi.VariableBounds)

    def __post_init__(self):
        source = mogi.MogiParams(self.source_xm_km, self.source_ym_km,
                                 self.source_depth_km, 0.0, nu=self.nu)
        if not self.bounds.contains(source.as_vector()):
            raise ValueError("true source must lie within the variable bounds")

    @property
    def source(self) -> mogi.MogiParams:
        return mogi.MogiParams(self.source_xm_km, self.source_ym_km,
                               self.source_depth_km, 0.0, nu=self.nu)


@dataclass
class Dataset:
    """Daily displacement samples plus optional ground truth.

    ``values`` is (n_days, 3 * n_stations) in mm. For synthetic data,
    ``components`` holds the exact additive decomposition (volcanic,
    trajectory, noise) and ``true_params`` the per-day source vector
    (xm_km, ym_km, depth_km, dv_m3).
    """

    days: np.ndarray
    values: np.ndarray
    geometry: mogi.StationGeometry
    start_date: datetime.date = datetime.date(2006, 1, 1)
    components: dict | None = None
    true_params: np.ndarray | None = None
    event_window: tuple | None = None
    offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.values.shape != (len(self.days), self.geometry.n_obs):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"({len(self.days)}, {self.geometry.n_obs})"
            )

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def n_obs(self) -> int:
        return self.geometry.n_obs

    def dates(self):
        return [self.start_date + datetime.timedelta(days=int(d)) for d in self.days]

    def window_mask(self, window=None) -> np.ndarray:
        window = window or self.event_window
        if window is None:
            raise ValueError("no event window available")
        start, stop = window
        return (self.days >= start) & (self.days < stop)


def pink_noise(n: int, amplitude: float, seed) -> np.ndarray:
    """Zero-mean series with power spectral density ~ 1/f, std = amplitude.

    Synthesized by shaping a white Gaussian spectrum with 1/sqrt(f) and
    transforming back; the fitted log-log PSD slope sits near -1 over the
    central frequency decades for long series.
    """
    if n < 1:
        raise ValueError(f"series length must be >= 1, got {n}")
    if amplitude == 0.0 or n < 4:
        return np.zeros(n)
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "pink")
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shaping = np.zeros_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    series = np.fft.irfft(spectrum * shaping, n)
    series = series - series.mean()
    std = series.std()
    if std == 0.0:
        return np.zeros(n)
    return series * (amplitude / std)


def generate(scenario: SyntheticScenario) -> Dataset:
    """Synthesize the daily dataset with its exact component decomposition."""
    days = np.arange(scenario.span_days)
    geometry = scenario.geometry
    n_obs = geometry.n_obs

    trajectory = scenario.trajectory.evaluate(days)

    # the field is linear in the volume change, so one unit-volume evaluation
    # spans the whole volcanic history
    unit_source = mogi.MogiParams(scenario.source_xm_km, scenario.source_ym_km,
                                  scenario.source_depth_km, 1.0, nu=scenario.nu)
    green = mogi.forward(unit_source, geometry)
    dv = scenario.profile.values(days)
    volcanic = dv[:, None] * green[None, :]

    white_rng = substream(scenario.seed, "white")
    noise = white_rng.standard_normal((scenario.span_days, n_obs)) * scenario.white_mm
    for dim in range(n_obs):
        noise[:, dim] += pink_noise(scenario.span_days, scenario.pink_mm,
                                    substream(scenario.seed, "pink", dim))

    values = trajectory + volcanic + noise
    true_params = np.column_stack([
        np.full_like(dv, scenario.source_xm_km),
        np.full_like(dv, scenario.source_ym_km),
        np.full_like(dv, scenario.source_depth_km),
        dv,
    ])
    return Dataset(
        days=days,
        values=values,
        geometry=geometry,
        start_date=scenario.start_date,
        components={"volcanic": volcanic, "trajectory": trajectory, "noise": noise},
        true_params=true_params,
        event_window=scenario.event_window,
    )


# -- train/val/test splitting ---------------------------------------------------

@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split(dataset: Dataset, event_window, seed: int, val_fraction: float = 0.1) -> SplitIndices:
    """Hold out the event window as test; shuffle the rest into train/val."""
    start, stop = event_window
    if start < dataset.days.min() or stop > dataset.days.max() + 1:
        raise ValueError(
            f"event window [{start}, {stop}) outside dataset span "
            f"[{dataset.days.min()}, {dataset.days.max() + 1})"
        )
    mask = (dataset.days >= start) & (dataset.days < stop)
    test = np.nonzero(mask)[0]
    rest = np.nonzero(~mask)[0]
    if rest.size == 0:
        raise ValueError("event window covers the whole dataset; train and val are empty")
    perm = substream(seed, "split").permutation(rest.size)
    rest = rest[perm]
    n_val = int(round(val_fraction * rest.size))
    val, train = rest[:n_val], rest[n_val:]
    if train.size == 0:
        raise ValueError("split leaves no training samples")
    return SplitIndices(train=train, val=val, test=np.sort(test))


# -- CSV interchange --------------------------------------------------------------

def write_observations_csv(path, dataset: Dataset):
    """Daily station rows: date,station,east_mm,north_mm,up_mm."""
    n = len(dataset.geometry)
    dates = dataset.dates()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "station"] + list(DIRECTIONS))
        for i, date in enumerate(dates):
            row = dataset.values[i]
            for s, name in enumerate(dataset.geometry.names):
                writer.writerow([
                    date.isoformat(), name,
                    format(row[s], ".12g"),
                    format(row[n + s], ".12g"),
                    format(row[2 * n + s], ".12g"),
                ])


def write_components_csv(path, dataset: Dataset):
    if dataset.components is None:
        raise ValueError("dataset has no ground-truth components")
    n = len(dataset.geometry)
    dates = dataset.dates()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "station", "component"] + list(DIRECTIONS))
        for i, date in enumerate(dates):
            for comp_name in ("volcanic", "trajectory", "noise"):
                comp = dataset.components[comp_name][i]
                for s, name in enumerate(dataset.geometry.names):
                    writer.writerow([
                        date.isoformat(), name, comp_name,
                        format(comp[s], ".12g"),
                        format(comp[n + s], ".12g"),
                        format(comp[2 * n + s], ".12g"),
                    ])


def write_true_params_csv(path, dataset: Dataset):
    if dataset.true_params is None:
        raise ValueError("dataset has no ground-truth source parameters")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "day", "xm_km", "ym_km", "depth_km", "dv_m3"])
        for i, date in enumerate(dataset.dates()):
            row = dataset.true_params[i]
            writer.writerow([date.isoformat(), int(dataset.days[i])]
                            + [format(v, ".12g") for v in row])


class UnknownStationError(ValueError):
    pass


class SparseStationError(ValueError):
    pass


def load_series(path, geometry: mogi.StationGeometry,
                max_missing_fraction: float = 0.5) -> Dataset:
    """Load daily station series, align, gap-fill, and de-mean.

    The output matrix covers the intersection of all stations' date spans,
    one row per calendar day. Interior gaps are filled by linear
    interpolation per station/direction (boundary gaps take the nearest
    value); a station missing more than half its days is rejected. Each
    column is de-meaned (GNSS positions carry arbitrary reference offsets)
    and the removed means are recorded on the dataset.
    """
    known = set(geometry.names)
    per_station: dict = {name: {} for name in geometry.names}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["date", "station"] + list(DIRECTIONS)
        if reader.fieldnames != expected:
            raise ValueError(
                f"series file {path}: expected header {','.join(expected)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            name = row["station"]
            if name not in known:
                raise UnknownStationError(
                    f"station {name!r} not present in the geometry file"
                )
            date = datetime.date.fromisoformat(row["date"])
            per_station[name][date] = tuple(float(row[d]) for d in DIRECTIONS)

    for name, series in per_station.items():
        if not series:
            raise SparseStationError(f"station {name} has no observations")
    start = max(min(s) for s in per_station.values())
    end = min(max(s) for s in per_station.values())
    if end < start:
        raise ValueError("station date spans do not overlap")
    span = (end - start).days + 1
    n = len(geometry)
    matrix = np.full((span, 3 * n), np.nan)
    for s, name in enumerate(geometry.names):
        for date, triple in per_station[name].items():
            offset = (date - start).days
            if 0 <= offset < span:
                matrix[offset, s] = triple[0]
                matrix[offset, n + s] = triple[1]
                matrix[offset, 2 * n + s] = triple[2]

    for s, name in enumerate(geometry.names):
        for block in range(3):
            col = matrix[:, block * n + s]
            present = np.isfinite(col)
            missing = 1.0 - present.mean()
            if missing > max_missing_fraction:
                raise SparseStationError(
                    f"station {name} is missing {missing:.0%} of days in the "
                    f"common span (limit {max_missing_fraction:.0%})"
                )
            if not present.all():
                idx = np.arange(span)
                col[~present] = np.interp(idx[~present], idx[present], col[present])

    offsets = matrix.mean(axis=0)
    matrix = matrix - offsets[None, :]
    return Dataset(
        days=np.arange(span),
        values=matrix,
        geometry=geometry,
        start_date=start,
        offsets=offsets,
    )


def dataset_from_run_dir(run_dir) -> Dataset:
    """Reload a dataset exactly as written by the generation command.

    Unlike load_series this keeps raw values (no de-meaning) and restores the
    ground-truth decomposition, per-day source parameters, and event window
    when their files are present.
    """
    import os

    import yaml

    geometry = mogi.read_geometry_csv(os.path.join(run_dir, "geometry.csv"))
    n = len(geometry)

    obs_path = os.path.join(run_dir, "observations.csv")
    dates: list = []
    date_rows: dict = {}
    with open(obs_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            date = datetime.date.fromisoformat(row["date"])
            if date not in date_rows:
                dates.append(date)
                date_rows[date] = {}
            date_rows[date][row["station"]] = tuple(float(row[d]) for d in DIRECTIONS)
    start = dates[0]
    days = np.array([(d - start).days for d in dates])
    values = np.zeros((len(dates), 3 * n))
    for i, date in enumerate(dates):
        for s, name in enumerate(geometry.names):
            e, nn, u = date_rows[date][name]
            values[i, s] = e
            values[i, n + s] = nn
            values[i, 2 * n + s] = u

    components = None
    comp_path = os.path.join(run_dir, "components.csv")
    if os.path.exists(comp_path):
        components = {name: np.zeros_like(values)
                      for name in ("volcanic", "trajectory", "noise")}
        day_index = {d: i for i, d in enumerate(dates)}
        sta_index = {name: s for s, name in enumerate(geometry.names)}
        with open(comp_path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                i = day_index[datetime.date.fromisoformat(row["date"])]
                s = sta_index[row["station"]]
                comp = components[row["component"]]
                comp[i, s] = float(row["east_mm"])
                comp[i, n + s] = float(row["north_mm"])
                comp[i, 2 * n + s] = float(row["up_mm"])

    true_params = None
    tp_path = os.path.join(run_dir, "true_params.csv")
    if os.path.exists(tp_path):
        true_params = np.zeros((len(dates), 4))
        day_index = {d: i for i, d in enumerate(dates)}
        with open(tp_path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                i = day_index[datetime.date.fromisoformat(row["date"])]
                true_params[i] = [float(row["xm_km"]), float(row["ym_km"]),
                                  float(row["depth_km"]), float(row["dv_m3"])]

    event_window = None
    scenario_path = os.path.join(run_dir, "scenario.yaml")
    if os.path.exists(scenario_path):
        with open(scenario_path) as fh:
            cfg = yaml.safe_load(fh)
        event_window = (cfg["event_window_start"], cfg["event_window_stop"])

    return Dataset(days=days, values=values, geometry=geometry, start_date=start,
                   components=components, true_params=true_params,
                   event_window=event_window)


# -- default scenario --------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Key-value description of a synthetic scenario (the file schema)."""

    seed: int = 2008
    span_days: int = 1400
    n_stations: int = 12
    source_xm_km: float = 2.0
    source_ym_km: float = 1.5
    source_depth_km: float = 9.35
    event_start_day: int = 730
    event_duration_days: int = 180
    event_total_m3: float = 3.7e6
    event_relax_per_day: float = 5e-4
    event_window_start: int = 640
    event_window_stop: int = 1005
    annual_mm_min: float = 2.0
    annual_mm_max: float = 4.0
    semiannual_mm_min: float = 0.5
    semiannual_mm_max: float = 1.0
    trend_mm_per_yr: float = 2.0
    intercept_mm: float = 2.0
    station_jitter: float = 0.25
    local_fraction: float = 0.7
    vertical_offset_mm: float = 0.0
    white_mm: float = 1.0
    pink_mm: float = 1.0
    nu: float = 0.25
    start_date: str = "2006-01-01"
    geometry_csv: str | None = None


def build_scenario(config: ScenarioConfig) -> SyntheticScenario:
    if config.geometry_csv:
        geometry = mogi.read_geometry_csv(config.geometry_csv)
    else:
        geometry = mogi.default_station_geometry(config.n_stations, seed=config.seed)
    trajectory = TrajectoryParams.draw(
        substream(config.seed, "trajectory"),
        geometry.n_obs,
        annual_mm=(config.annual_mm_min, config.annual_mm_max),
        semiannual_mm=(config.semiannual_mm_min, config.semiannual_mm_max),
        trend_mm_per_yr=config.trend_mm_per_yr,
        intercept_mm=config.intercept_mm,
        station_jitter=config.station_jitter,
        local_fraction=config.local_fraction,
        vertical_offset_mm=config.vertical_offset_mm,
    )
    profile = VolumeProfile(
        t_start=config.event_start_day,
        duration_days=config.event_duration_days,
        total_m3=config.event_total_m3,
        relax_per_day=config.event_relax_per_day,
    )
    return SyntheticScenario(
        geometry=geometry,
        source_xm_km=config.source_xm_km,
        source_ym_km=config.source_ym_km,
        source_depth_km=config.source_depth_km,
        profile=profile,
        trajectory=trajectory,
        white_mm=config.white_mm,
        pink_mm=config.pink_mm,
        seed=config.seed,
        span_days=config.span_days,
        event_window=(config.event_window_start, config.event_window_stop),
        start_date=datetime.date.fromisoformat(config.start_date),
        nu=config.nu,
    )


def default_scenario(seed: int | None = None) -> SyntheticScenario:
    config = ScenarioConfig() if seed is None else replace(ScenarioConfig(), seed=seed)
    return build_scenario(config)
