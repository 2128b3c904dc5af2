"""Shared vocabulary: time partitions, controls, measures, parametric fields.

Conventions used across the package:

* A cloud of M points in R^n is a float64 array of shape (M, n); single
  points may be passed as flat length-n arrays.
* Field callables (``ParametricField.eval`` / ``.jacobian_x``) must broadcast
  over leading axes: eval maps (..., n) -> (..., n), jacobian_x maps
  (..., n) -> (..., n, n).
* Every type here is immutable after construction (stored arrays are copies
  with the writeable flag cleared), so instances are safe to share across
  threads; all operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

WEIGHT_TOL = 1e-12
GRID_MASS_TOL = 1e-9

BOUNDARY_KINDS = ("periodic", "reflecting")


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimePartition:
    """Ordered time mesh 0 = t_0 < t_1 < ... < t_N = T."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen_array(self.nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a time partition needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("a time partition must start at t = 0")
        if not np.all(np.diff(nodes) > 0.0):
            raise ValueError("partition nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, horizon: float, n_intervals: int) -> "TimePartition":
        return cls(np.linspace(0.0, float(horizon), int(n_intervals) + 1))

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_intervals(self) -> int:
        return self.nodes.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    def interval_index(self, t: float) -> int:
        """Index i with t in [t_i, t_{i+1}); t = T maps to the last interval."""
        if t < 0.0 or t > self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        i = int(np.searchsorted(self.nodes, t, side="right")) - 1
        return min(i, self.n_intervals - 1)


@dataclass(frozen=True)
class ControlSet:
    """Box of admissible control values, optionally with a finite candidate grid.

    The candidate grid supports exhaustive pointwise minimization when the
    driving field has no affine control decomposition.
    """

    lower: np.ndarray
    upper: np.ndarray
    candidates: np.ndarray | None = None

    def __post_init__(self):
        lower = _frozen_array(np.atleast_1d(self.lower))
        upper = _frozen_array(np.atleast_1d(self.upper))
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("control bounds must be 1-D vectors of equal length")
        if np.any(lower > upper):
            raise ValueError("lower control bound exceeds upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if self.candidates is not None:
            cand = np.atleast_2d(np.array(self.candidates, dtype=float))
            if cand.shape[0] < 1 or cand.shape[1] != lower.size:
                raise ValueError("candidate grid shape does not match the control dimension")
            if np.any(cand < lower - 1e-12) or np.any(cand > upper + 1e-12):
                raise ValueError("candidate grid must lie inside the control box")
            object.__setattr__(self, "candidates", _frozen_array(cand))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, value, tol: float = 1e-12) -> bool:
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def clip(self, value) -> np.ndarray:
        return np.clip(np.atleast_1d(np.asarray(value, dtype=float)), self.lower, self.upper)


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control: one m-vector per partition interval.

    Values are right-continuous in time: u(t) = values[i] for t in
    [t_i, t_{i+1}), and u(T) = values[-1].
    """

    partition: TimePartition
    values: np.ndarray
    bounds: ControlSet

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.partition.n_intervals:
            raise ValueError("need one control value per partition interval")
        if vals.shape[1] != self.bounds.dim:
            raise ValueError("control value dimension does not match the bounds")
        if np.any(vals < self.bounds.lower - 1e-12) or np.any(vals > self.bounds.upper + 1e-12):
            raise ValueError("control values must lie in the admissible box")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, partition: TimePartition, value, bounds: ControlSet) -> "ControlSignal":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(partition, np.tile(v, (partition.n_intervals, 1)), bounds)

    def with_values(self, values) -> "ControlSignal":
        return ControlSignal(self.partition, values, self.bounds)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def sample_control(signal: ControlSignal, t: float) -> np.ndarray:
    """Control value in force at time t (right-continuous; u(T) = last value)."""
    return signal.values[signal.partition.interval_index(t)]


@dataclass(frozen=True)
class ParticleMeasure:
    """Weighted particle cloud: a probability measure with finite support."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must form a nonempty (M, n) array")
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size != pts.shape[0]:
            raise ValueError("weights and points must have equal length")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        total = float(np.sum(w))
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 (got {total!r})")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x) -> "ParticleMeasure":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x[None, :], np.array([1.0]))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]


def pushforward(measure: ParticleMeasure, map_fn: Callable) -> ParticleMeasure:
    """Image measure of a particle cloud under a pointwise map.

    The map may be vectorized ((M, n) -> (M, n)); if it only handles single
    points it is applied row by row.  Weights are untouched, so total mass is
    preserved exactly.
    """
    pts = measure.points
    mapped = None
    try:
        out = np.asarray(map_fn(pts), dtype=float)
        if out.shape == pts.shape:
            mapped = out
    except Exception:
        mapped = None
    if mapped is None:
        rows = [np.atleast_1d(np.asarray(map_fn(p), dtype=float)) for p in pts]
        mapped = np.stack(rows, axis=0)
        if mapped.shape != pts.shape:
            raise ValueError("map must preserve the state dimension")
    finite = np.all(np.isfinite(mapped), axis=1)
    if not np.all(finite):
        bad = int(np.argmin(finite))
        raise ValueError(f"map produced a non-finite image for particle {bad}")
    return ParticleMeasure(mapped, measure.weights)


def moments(measure) -> tuple[np.ndarray, float]:
    """Expectation vector and scalar (trace) variance of a measure.

    Works for both particle clouds and grid densities; grids use cell-center
    quadrature.  The variance is sum_k Var(x_k) = E|x|^2 - |E x|^2.
    """
    if isinstance(measure, GridMeasure):
        pts = measure.centers()
        w = measure.density * measure.cell_volume
        w = w / np.sum(w)
    else:
        pts, w = measure.points, measure.weights
    mean = w @ pts
    second = float(w @ np.einsum("mi,mi->m", pts, pts))
    return mean, second - float(mean @ mean)


@dataclass(frozen=True)
class GridAxis:
    """Uniform 1-D cell-center grid: centers at origin + spacing * k."""

    origin: float
    spacing: float
    count: int

    def __post_init__(self):
        if self.spacing <= 0.0 or self.count < 1:
            raise ValueError("grid axis needs positive spacing and count >= 1")

    @property
    def centers(self) -> np.ndarray:
        return self.origin + self.spacing * np.arange(self.count)

    @property
    def length(self) -> float:
        return self.spacing * self.count


@dataclass(frozen=True)
class GridMeasure:
    """Density values on a uniform rectangular grid (row-major cell order).

    ``density[flat_index]`` is the value at the cell center; the represented
    measure has mass density * cell_volume per cell and must be a probability
    measure within ``mass_tol``.  ``boundary_kinds`` tags each axis as
    "periodic" or "reflecting" for the Eulerian solver.
    """

    axes: tuple[GridAxis, ...]
    density: np.ndarray
    boundary_kinds: tuple[str, ...]
    mass_tol: float = GRID_MASS_TOL

    def __post_init__(self):
        axes = tuple(self.axes)
        if len(axes) < 1:
            raise ValueError("grid needs at least one axis")
        object.__setattr__(self, "axes", axes)
        kinds = tuple(self.boundary_kinds)
        if len(kinds) != len(axes) or any(k not in BOUNDARY_KINDS for k in kinds):
            raise ValueError(f"boundary kinds must be per-axis tags from {BOUNDARY_KINDS}")
        object.__setattr__(self, "boundary_kinds", kinds)
        dens = np.array(self.density, dtype=float).reshape(-1)
        expected = int(np.prod([ax.count for ax in axes]))
        if dens.size != expected:
            raise ValueError(f"density length {dens.size} does not match grid size {expected}")
        if np.any(dens < 0.0):
            raise ValueError("density values must be nonnegative")
        mass = float(np.sum(dens)) * self.cell_volume
        if abs(mass - 1.0) > self.mass_tol:
            raise ValueError(f"grid mass {mass!r} deviates from 1 beyond tolerance {self.mass_tol}")
        dens.setflags(write=False)
        object.__setattr__(self, "density", dens)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.count for ax in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([ax.spacing for ax in self.axes]))

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.density)) * self.cell_volume

    def grid(self) -> np.ndarray:
        return self.density.reshape(self.shape)

    def centers(self) -> np.ndarray:
        """Cell centers as an (M, dim) array in row-major cell order."""
        mesh = np.meshgrid(*[ax.centers for ax in self.axes], indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def with_density(self, density, mass_tol: float | None = None) -> "GridMeasure":
        tol = self.mass_tol if mass_tol is None else mass_tol
        return GridMeasure(self.axes, density, self.boundary_kinds, tol)

    def to_particles(self, mass_floor: float = 0.0) -> ParticleMeasure:
        """One particle per cell, weighted by cell mass.

        Cells with mass below ``mass_floor`` are dropped and the remaining
        weights renormalized to total 1.
        """
        w = self.density * self.cell_volume
        keep = w >= mass_floor if mass_floor > 0.0 else w > 0.0
        if not np.any(keep):
            raise ValueError("no cell mass above the floor")
        pts = self.centers()[keep]
        w = w[keep]
        return ParticleMeasure(pts, w / np.sum(w))

    def save(self, path) -> None:
        """Write the text format: a header line, then one density per line.

        Header: ``axes: origin spacing count [ x further axes]; boundary: tags``
        with >= 12 significant digits on every number.
        """
        axes_part = " x ".join(
            f"{ax.origin:.17g} {ax.spacing:.17g} {ax.count}" for ax in self.axes
        )
        header = f"axes: {axes_part}; boundary: {' '.join(self.boundary_kinds)}"
        lines = [header]
        lines.extend(f"{v:.17g}" for v in self.density)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, mass_tol: float = GRID_MASS_TOL) -> "GridMeasure":
        text = Path(path).read_text(encoding="utf-8").strip().splitlines()
        if not text or not text[0].startswith("axes:"):
            raise ValueError(f"{path}: missing 'axes:' header line")
        header = text[0]
        try:
            axes_part, boundary_part = header.split("; boundary:")
            axes = []
            for chunk in axes_part[len("axes:"):].split(" x "):
                origin, spacing, count = chunk.split()
                axes.append(GridAxis(float(origin), float(spacing), int(count)))
            kinds = tuple(boundary_part.split())
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: malformed header {header!r}") from exc
        density = np.array([float(line) for line in text[1:] if line.strip()])
        return cls(tuple(axes), density, kinds, mass_tol)


@dataclass(frozen=True)
class ParametricField:
    """Controlled velocity field x' = eval(x, u).

    ``eval(x, u)`` and ``jacobian_x(x, u)`` take a state batch (..., n) and a
    single control vector (m,) and must broadcast over the leading axes.
    ``affine_decomposition``, when present, is a pair (a, b) of callables with
    eval(x, u) = a(x) @ u + b(x), a(x) of shape (..., n, m); it unlocks the
    closed-form feedback minimizer.  ``growth_bound`` documents the constant M
    of the sublinear bound |eval(x, u)| <= M (1 + |x|) on the working domain
    (verified by sampling in the tests, not enforced here).
    """

    eval: Callable
    jacobian_x: Callable
    affine_decomposition: tuple[Callable, Callable] | None = None
    growth_bound: float | None = None


def affine_consistency_error(field: ParametricField, points: np.ndarray, controls) -> float:
    """Largest |eval - (a u + b)| over sampled states and controls."""
    if field.affine_decomposition is None:
        raise ValueError("field has no affine decomposition")
    a_fn, b_fn = field.affine_decomposition
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    worst = 0.0
    for u in np.atleast_2d(np.asarray(controls, dtype=float)):
        direct = field.eval(pts, u)
        assembled = np.einsum("...nm,m->...n", a_fn(pts), u) + b_fn(pts)
        worst = max(worst, float(np.max(np.abs(direct - assembled))))
    return worst
