"""Point-pressure-source surface deformation in an elastic half-space.

A spherical pressure source (magma chamber) at depth d below (x_m, y_m)
with volume change dV displaces a surface station at horizontal offset
(dx, dy) by

    u_e = alpha * dx / R^3,   u_n = alpha * dy / R^3,   u_v = alpha * d / R^3,

with alpha = (1 - nu) * dV / pi and R = sqrt(dx^2 + dy^2 + d^2). Inflation
(dV > 0) produces uplift and radially outward horizontal motion.

Units: geometry in km at the interface, converted to meters internally;
volume change in m^3; displacements in mm. Observation vectors flatten as
east block, then north, then vertical, each in station order.

Two independent routes are provided on purpose: the closed-form NumPy
evaluation (forward / jacobian, used by the data generator and as a test
oracle) and a tape route (decode_tape, used inside models); they are
cross-checked against each other and against finite differences.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .rng import substream

VARIABLE_NAMES = ("xm", "ym", "depth", "dv")

KM = 1000.0
MM_PER_M = 1000.0


class UnknownVariableError(ValueError):
    """A variable name outside VARIABLE_NAMES was requested."""

    def __init__(self, name):
        super().__init__(
            f"unknown variable {name!r}; valid names: {', '.join(VARIABLE_NAMES)}"
        )


@dataclass(frozen=True)
class VariableBounds:
    """Physical ranges of the learned source variables (km, km, km, m^3)."""

    xm: tuple = (-9.33, 14.35)
    ym: tuple = (-5.80, 7.62)
    depth: tuple = (2.0, 20.0)
    dv: tuple = (-10e6, 10e6)

    def __post_init__(self):
        for name in VARIABLE_NAMES:
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"bounds for {name} must satisfy min < max, got {lo} >= {hi}")

    def as_arrays(self):
        lo = np.array([getattr(self, n)[0] for n in VARIABLE_NAMES])
        hi = np.array([getattr(self, n)[1] for n in VARIABLE_NAMES])
        return lo, hi

    def contains(self, params) -> bool:
        lo, hi = self.as_arrays()
        vec = params.as_vector() if isinstance(params, MogiParams) else np.asarray(params)
        return bool(np.all(vec >= lo) and np.all(vec <= hi))

    @property
    def horizontal_box_diagonal_km(self) -> float:
        return math.hypot(self.xm[1] - self.xm[0], self.ym[1] - self.ym[0])


@dataclass(frozen=True)
class MogiParams:
    """Source location (km), depth (km), volume change (m^3), Poisson ratio."""

    xm_km: float
    ym_km: float
    depth_km: float
    dv_m3: float
    nu: float = 0.25

    def __post_init__(self):
        if self.depth_km <= 0:
            raise ValueError(f"depth must be positive, got {self.depth_km} km")

    def as_vector(self) -> np.ndarray:
        return np.array([self.xm_km, self.ym_km, self.depth_km, self.dv_m3])

    @classmethod
    def from_vector(cls, vec, nu: float = 0.25) -> "MogiParams":
        return cls(float(vec[0]), float(vec[1]), float(vec[2]), float(vec[3]), nu=nu)


@dataclass(frozen=True)
class StationGeometry:
    """Named surface stations at (x, y) km; elevation fixed at zero.

    Station order is canonical: it defines how observation vectors flatten.
    """

    names: tuple
    coords_km: np.ndarray = field(repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords_km, dtype=np.float64)
        if coords.shape != (len(self.names), 2):
            raise ValueError(
                f"expected coords of shape ({len(self.names)}, 2), got {coords.shape}"
            )
        if len(set(self.names)) != len(self.names):
            raise ValueError("station identifiers must be unique")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "coords_km", coords)

    def __len__(self):
        return len(self.names)

    @property
    def n_obs(self) -> int:
        return 3 * len(self.names)

    def obs_labels(self):
        """Flattened labels, east block then north then vertical."""
        return [
            f"{name}_{direction}"
            for direction in ("e", "n", "v")
            for name in self.names
        ]


def read_geometry_csv(path) -> StationGeometry:
    names, coords = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["station", "x_km", "y_km"]
        if reader.fieldnames != expected:
            raise ValueError(
                f"geometry file {path}: expected header {','.join(expected)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            names.append(row["station"])
            coords.append((float(row["x_km"]), float(row["y_km"])))
    return StationGeometry(tuple(names), np.array(coords))


def write_geometry_csv(path, geometry: StationGeometry):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station", "x_km", "y_km"])
        for name, (x, y) in zip(geometry.names, geometry.coords_km):
            writer.writerow([name, format(x, ".12g"), format(y, ".12g")])


def default_station_geometry(n_stations: int = 12, seed: int = 2008,
                             center_km=(2.5, 1.0), radius_km=(2.5, 10.0),
                             bounds: VariableBounds = None) -> StationGeometry:
    """Seeded station layout ringing the volcano, inside the bounds box.

    Real network coordinates are not bundled, so synthetic runs place
    stations deterministically: monitoring networks cluster around the
    edifice, so stations draw a radius and azimuth about the nominal center,
    rejected until they fall inside the horizontal box with a minimum 1.5 km
    spacing.
    """
    bounds = bounds or VariableBounds()
    rng = substream(seed, "stations")
    coords = []
    while len(coords) < n_stations:
        radius = rng.uniform(*radius_km)
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        x = center_km[0] + radius * math.cos(azimuth)
        y = center_km[1] + radius * math.sin(azimuth)
        if not (bounds.xm[0] <= x <= bounds.xm[1] and bounds.ym[0] <= y <= bounds.ym[1]):
            continue
        if all(math.hypot(x - cx, y - cy) >= 1.5 for cx, cy in coords):
            coords.append((x, y))
    names = tuple(f"ST{i + 1:02d}" for i in range(n_stations))
    return StationGeometry(names, np.array(coords))


# -- normalized <-> physical ---------------------------------------------------

def rescale(eta, bounds: VariableBounds) -> np.ndarray:
    """Map normalized variables in [0, 1]^4 to physical units (affine)."""
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(eta < 0.0) or np.any(eta > 1.0):
        raise ValueError(f"normalized variables must lie in [0, 1], got range "
                         f"[{eta.min()}, {eta.max()}]")
    lo, hi = bounds.as_arrays()
    return (hi - lo) * eta + lo


def rescale_tape(eta: dc.Tensor, bounds: VariableBounds) -> dc.Tensor:
    """Tape version of rescale for (n, 4) batches; differentiable."""
    lo, hi = bounds.as_arrays()
    return dc.add(dc.mul(eta, dc.Tensor(hi - lo)), dc.Tensor(lo))


# -- closed-form forward and jacobian ------------------------------------------

def forward(params: MogiParams, geometry: StationGeometry) -> np.ndarray:
    """Surface displacements in mm, flattened east/north/vertical blocks."""
    if len(geometry) == 0:
        raise ValueError("geometry must contain at least one station")
    alpha = (1.0 - params.nu) * params.dv_m3 / math.pi
    dx = (geometry.coords_km[:, 0] - params.xm_km) * KM
    dy = (geometry.coords_km[:, 1] - params.ym_km) * KM
    d = params.depth_km * KM
    r3 = (dx * dx + dy * dy + d * d) ** 1.5
    ue = alpha * dx / r3 * MM_PER_M
    un = alpha * dy / r3 * MM_PER_M
    uv = alpha * d / r3 * MM_PER_M
    out = np.concatenate([ue, un, uv])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite displacement; check source depth")
    return out


def jacobian(params: MogiParams, geometry: StationGeometry) -> np.ndarray:
    """Closed-form partials of all 3N outputs w.r.t. (xm, ym, depth, dv).

    Units match the interface: mm per km for the three geometric variables,
    mm per m^3 for the volume change.
    """
    alpha = (1.0 - params.nu) * params.dv_m3 / math.pi
    dadv = (1.0 - params.nu) / math.pi
    dx = (geometry.coords_km[:, 0] - params.xm_km) * KM
    dy = (geometry.coords_km[:, 1] - params.ym_km) * KM
    d = params.depth_km * KM
    r2 = dx * dx + dy * dy + d * d
    r3 = r2 ** 1.5
    r5 = r2 ** 2.5

    n = len(geometry)
    jac = np.zeros((3 * n, 4))
    # meters-per-meter partials, then unit conversion per column
    due = np.stack([
        alpha * (-1.0 / r3 + 3.0 * dx * dx / r5),
        alpha * 3.0 * dx * dy / r5,
        alpha * (-3.0) * dx * d / r5,
        dadv * dx / r3,
    ], axis=1)
    dun = np.stack([
        alpha * 3.0 * dy * dx / r5,
        alpha * (-1.0 / r3 + 3.0 * dy * dy / r5),
        alpha * (-3.0) * dy * d / r5,
        dadv * dy / r3,
    ], axis=1)
    duv = np.stack([
        alpha * 3.0 * d * dx / r5,
        alpha * 3.0 * d * dy / r5,
        alpha * (1.0 / r3 - 3.0 * d * d / r5),
        dadv * d / r3,
    ], axis=1)
    jac[:n] = due
    jac[n:2 * n] = dun
    jac[2 * n:] = duv
    # output m -> mm; geometric inputs km -> (per km)
    jac[:, :3] *= MM_PER_M * KM
    jac[:, 3] *= MM_PER_M
    return jac


def forward_batch(z_phys: np.ndarray, geometry: StationGeometry, nu: float = 0.25) -> np.ndarray:
    """Closed-form displacements for a batch of parameter vectors.

    ``z_phys`` is (n, 4) in interface units; returns (n, 3N) mm.
    """
    z = np.asarray(z_phys, dtype=np.float64)
    alpha = (1.0 - nu) * z[:, 3:4] / math.pi
    dx = geometry.coords_km[None, :, 0] * KM - z[:, 0:1] * KM
    dy = geometry.coords_km[None, :, 1] * KM - z[:, 1:2] * KM
    d = z[:, 2:3] * KM
    r3 = (dx * dx + dy * dy + d * d) ** 1.5
    ue = alpha * dx / r3 * MM_PER_M
    un = alpha * dy / r3 * MM_PER_M
    uv = alpha * d / r3 * MM_PER_M
    return np.concatenate([ue, un, uv], axis=1)


# -- tape route for models ------------------------------------------------------

def decode_tape(z_phys: dc.Tensor, geometry: StationGeometry, nu: float = 0.25) -> dc.Tensor:
    """Displacement field on the tape for a batch of physical variables.

    ``z_phys`` is (n, 4) in interface units (km, km, km, m^3); the result is
    (n, 3N) in mm with the canonical east/north/vertical flattening.
    """
    xm = dc.slice_last(z_phys, 0, 1)
    ym = dc.slice_last(z_phys, 1, 2)
    depth = dc.slice_last(z_phys, 2, 3)
    dv = dc.slice_last(z_phys, 3, 4)

    sx = dc.Tensor(geometry.coords_km[None, :, 0] * KM)
    sy = dc.Tensor(geometry.coords_km[None, :, 1] * KM)
    dx = dc.sub(sx, dc.mul(xm, KM))
    dy = dc.sub(sy, dc.mul(ym, KM))
    d_m = dc.mul(depth, KM)

    r2 = dc.add(dc.add(dc.square(dx), dc.square(dy)), dc.square(d_m))
    inv_r3 = dc.power(r2, -1.5)
    alpha = dc.mul(dv, (1.0 - nu) / math.pi)

    ue = dc.mul(dc.mul(alpha, dc.mul(dx, inv_r3)), MM_PER_M)
    un = dc.mul(dc.mul(alpha, dc.mul(dy, inv_r3)), MM_PER_M)
    uv = dc.mul(dc.mul(alpha, dc.mul(d_m, inv_r3)), MM_PER_M)
    return dc.concat_last([ue, un, uv])


# -- standardized-gradient sensitivity ------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """One or two swept variables plus fixed values for the rest.

    ``sweep`` maps variable names to 1-D arrays of physical values;
    ``fixed`` maps the remaining names to physical scalars (unspecified
    variables sit at the midpoint of their bounds).
    """

    sweep: dict
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= len(self.sweep) <= 2:
            raise ValueError("grid must sweep one or two variables")
        for name in list(self.sweep) + list(self.fixed):
            if name not in VARIABLE_NAMES:
                raise UnknownVariableError(name)


def sensitivity_profile(bounds: VariableBounds, geometry: StationGeometry,
                        grid: GridSpec, output_std=None, nu: float = 0.25):
    """Standardized forward-model gradients over a parameter grid.

    For every grid point the gradient of each output dimension with respect
    to the swept variables is taken in normalized coordinates (chain-ruled
    through the affine range mapping) and divided by that output dimension's
    dataset standard deviation, so magnitudes match what the encoder sees.

    Returns (header, rows) in long format: one row per grid point x swept
    variable x output dimension.
    """
    lo, hi = bounds.as_arrays()
    span = hi - lo
    if output_std is None:
        output_std = np.ones(geometry.n_obs)
    output_std = np.asarray(output_std, dtype=np.float64)
    if output_std.shape != (geometry.n_obs,):
        raise ValueError(
            f"output_std must have shape ({geometry.n_obs},), got {output_std.shape}"
        )

    sweep_names = list(grid.sweep)
    base = {name: 0.5 * (lo[i] + hi[i]) for i, name in enumerate(VARIABLE_NAMES)}
    base.update(grid.fixed)

    axes = [np.asarray(grid.sweep[name], dtype=np.float64) for name in sweep_names]
    mesh = np.meshgrid(*axes, indexing="ij")
    labels = geometry.obs_labels()
    var_index = {name: i for i, name in enumerate(VARIABLE_NAMES)}

    header = [f"{name}_value" for name in sweep_names] + [
        "output_dim", "wrt_variable", "standardized_gradient",
    ]
    rows = []
    for flat_idx in range(mesh[0].size):
        point = dict(base)
        coords = []
        for ax, name in enumerate(sweep_names):
            value = float(mesh[ax].ravel()[flat_idx])
            point[name] = value
            coords.append(value)
        params = MogiParams(point["xm"], point["ym"], point["depth"], point["dv"], nu=nu)
        jac = jacobian(params, geometry)
        for name in sweep_names:
            col = var_index[name]
            grad_eta = jac[:, col] * span[col] / output_std
            for dim, label in enumerate(labels):
                rows.append(coords + [label, name, grad_eta[dim]])
    return header, rows
