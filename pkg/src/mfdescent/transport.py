"""Continuity-equation solvers: particle pushforward and Lax-Friedrichs.

The Lagrangian route transports the atoms of a particle measure along the
characteristic flow, which realizes the weak solution exactly on particle
data.  The Eulerian route is the explicit Lax-Friedrichs update on a uniform
cell-centered grid,

    rho_new = (axis-neighbor average of rho) - sum_k dt/(2 h_k) (F_k+ - F_k-),

with flux F_k = V_k rho, the field sampled at cell centers and the control at
each step's left endpoint.  Periodic axes wrap; reflecting axes use ghost
cells that mirror the density and negate the normal flux, which makes the
scheme conservative on walls (zero normal flux through the boundary faces).
The scheme's first-order numerical diffusion is accepted and documented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ControlSignal,
    GridMeasure,
    ParametricField,
    ParticleMeasure,
    TimePartition,
)
from .errors import ConfigurationError
from .flows import DEFAULT_BLOWUP, rk4_steps

SNAPSHOT_MASS_TOL = 1e-6


@dataclass(frozen=True)
class EulerianTrajectory:
    """Stored grid snapshots of an Eulerian solve (stride-thinned in time)."""

    partition: TimePartition
    snapshots: tuple[GridMeasure, ...]
    clipped_cells: int = 0

    def __post_init__(self):
        if len(self.snapshots) != self.partition.nodes.size:
            raise ValueError("need one snapshot per stored node")
        m0 = self.snapshots[0].total_mass
        for snap in self.snapshots:
            if abs(snap.total_mass - m0) > SNAPSHOT_MASS_TOL:
                raise ValueError("snapshot mass drifted beyond tolerance")

    @property
    def final(self) -> GridMeasure:
        return self.snapshots[-1]

    def export(self, directory, prefix: str = "node") -> list[str]:
        """One grid file per stored node, named by node index."""
        from pathlib import Path

        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, snap in enumerate(self.snapshots):
            path = out / f"{prefix}_{i:04d}.dat"
            snap.save(path)
            paths.append(str(path))
        return paths


def solve_lagrangian(
    field: ParametricField,
    control: ControlSignal,
    initial: ParticleMeasure,
    partition: TimePartition | None = None,
    substeps: int = 20,
    blowup: float = DEFAULT_BLOWUP,
) -> list[ParticleMeasure]:
    """Particle measures at every partition node under the characteristic flow.

    Node k holds the pushforward of ``initial`` through X_{0, t_k}; weights
    never change.
    """
    part = control.partition if partition is None else partition
    if not np.array_equal(part.nodes, control.partition.nodes):
        raise ConfigurationError("partition must match the control partition")
    pts = initial.points.copy()
    out = [initial]
    for i in range(part.n_intervals):
        h = part.widths[i] / substeps
        pts = rk4_steps(field, control.values[i], pts, h, substeps,
                        float(part.nodes[i]), blowup)
        out.append(ParticleMeasure(pts, initial.weights))
    return out


def _neighbors(arr: np.ndarray, axis: int, kind: str, flux: bool):
    """(forward, backward) neighbor arrays with boundary ghosts.

    Reflecting ghosts mirror densities and negate fluxes so the normal flux
    through the wall faces vanishes.
    """
    if kind == "periodic":
        return np.roll(arr, -1, axis=axis), np.roll(arr, 1, axis=axis)
    sign = -1.0 if flux else 1.0
    body = np.moveaxis(arr, axis, 0)
    fwd = np.concatenate([body[1:], sign * body[-1:]], axis=0)
    bwd = np.concatenate([sign * body[:1], body[:-1]], axis=0)
    return np.moveaxis(fwd, 0, axis), np.moveaxis(bwd, 0, axis)


def _lf_step(rho, velocities, dt, spacings, kinds):
    d = rho.ndim
    avg = np.zeros_like(rho)
    fluxdiv = np.zeros_like(rho)
    for k in range(d):
        rp, rm = _neighbors(rho, k, kinds[k], flux=False)
        avg += rp + rm
        f = velocities[k] * rho
        fp, fm = _neighbors(f, k, kinds[k], flux=True)
        fluxdiv += (fp - fm) * (dt / (2.0 * spacings[k]))
    return avg / (2.0 * d) - fluxdiv


def _cfl_check(field, control, initial, dt, t_end):
    """Reject configurations violating dt |V_k| / h_k <= 1 on any cell."""
    centers = initial.centers()
    shape = initial.shape
    spacings = [ax.spacing for ax in initial.axes]
    part = control.partition
    seen = set()
    for i in range(part.n_intervals):
        if part.nodes[i] >= t_end:
            break
        key = control.values[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        vel = np.asarray(field.eval(centers, control.values[i]), dtype=float)
        for k in range(len(shape)):
            ratio = np.abs(vel[:, k]) * dt / spacings[k]
            worst = int(np.argmax(ratio))
            if ratio[worst] > 1.0:
                cell = np.unravel_index(worst, shape)
                raise ConfigurationError(
                    f"CFL violation on axis {k} at cell {cell}: "
                    f"|V| = {abs(vel[worst, k]):.6g}, dt/h = {dt / spacings[k]:.6g}"
                )


def solve_lax_friedrichs(
    field: ParametricField,
    control: ControlSignal,
    initial: GridMeasure,
    t_end: float,
    dt: float,
    snapshot_stride: int = 1,
) -> EulerianTrajectory:
    """Explicit Lax-Friedrichs solve of the continuity equation on a grid.

    ``t_end`` must be an integer number of steps ``dt`` (within 1e-9) and lie
    inside the control horizon.  Every ``snapshot_stride``-th step is stored
    (plus the initial and final states).  Densities driven negative beyond
    -1e-12 by roundoff are clipped to zero and counted in ``clipped_cells``.
    """
    if dt <= 0.0:
        raise ConfigurationError("dt must be positive")
    if t_end <= 0.0 or t_end > control.partition.horizon + 1e-12:
        raise ConfigurationError("t_end must lie in (0, T]")
    n_steps = int(round(t_end / dt))
    if n_steps < 1 or abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigurationError("t_end must be an integer multiple of dt")
    if snapshot_stride < 1:
        raise ConfigurationError("snapshot stride must be >= 1")
    _cfl_check(field, control, initial, dt, t_end)

    centers = initial.centers()
    shape = initial.shape
    spacings = [ax.spacing for ax in initial.axes]
    kinds = initial.boundary_kinds
    rho = initial.grid().copy()

    snapshots = [initial]
    times = [0.0]
    clipped = 0
    vel_cache: dict[int, list[np.ndarray]] = {}
    for step in range(n_steps):
        t = step * dt
        idx = control.partition.interval_index(t)
        if idx not in vel_cache:
            vel = np.asarray(field.eval(centers, control.values[idx]), dtype=float)
            vel_cache[idx] = [vel[:, k].reshape(shape) for k in range(len(shape))]
        rho = _lf_step(rho, vel_cache[idx], dt, spacings, kinds)
        negative = rho < 0.0
        if np.any(negative):
            clipped += int(np.count_nonzero(rho < -1e-12))
            rho = np.where(negative, 0.0, rho)
        if (step + 1) % snapshot_stride == 0 or step + 1 == n_steps:
            snapshots.append(initial.with_density(rho.reshape(-1), mass_tol=SNAPSHOT_MASS_TOL))
            times.append((step + 1) * dt)
    return EulerianTrajectory(TimePartition(np.array(times)), tuple(snapshots), clipped)
