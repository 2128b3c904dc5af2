"""Characteristic flows of controlled fields and their anchored Jacobians.

The flow X_{s,t} solves dX/dt = V_{u(t)}(X) with X_{s,s} = id.  For a fixed
anchor T, the Jacobian J_{t,T}(x) = D_x X_{t,T}(x) restricted to the forward
trajectory through x satisfies the backward linear problem

    dJ/dt = -J . D_x V_{u(t)}(x(t)),        J(T) = I,

which follows from J_{t,T}(x(t)) = J_{0,T}(x(0)) [D_x X_{0,t}(x(0))]^{-1} and
the forward variational equation.  The derivative of the inverse flow is
d/dt X_{t,T} = -J_{t,T} V_t.

Integration is fixed-step classical RK4.  Steps never straddle a
control-interval boundary, so the field is autonomous within every step.  The
Jacobian pass steps backward across two stored forward substeps at a time, so
its RK4 stages land exactly on stored states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ControlSignal, ParametricField, TimePartition
from .errors import ConfigurationError, DivergenceError

DEFAULT_BLOWUP = 1e6


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :].copy(), True
    return x.copy(), False


def _check_state(x: np.ndarray, t: float, blowup: float) -> None:
    worst = float(np.max(np.abs(x)))
    if not np.isfinite(worst) or worst > blowup:
        raise DivergenceError(
            f"state norm {worst!r} exceeded the blow-up bound {blowup} at t = {t:.6g}",
            time=t,
        )


def rk4_steps(
    field: ParametricField,
    u: np.ndarray,
    x: np.ndarray,
    h: float,
    steps: int,
    t0: float,
    blowup: float = DEFAULT_BLOWUP,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Advance a state batch by ``steps`` RK4 steps of (signed) size h.

    The control value u is held fixed.  When ``out`` is given, the state after
    step k is stored in out[k].
    """
    for k in range(steps):
        k1 = field.eval(x, u)
        k2 = field.eval(x + (0.5 * h) * k1, u)
        k3 = field.eval(x + (0.5 * h) * k2, u)
        k4 = field.eval(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_state(x, t0 + (k + 1) * h, blowup)
        if out is not None:
            out[k] = x
    return x


def _segments(partition: TimePartition, t_from: float, t_to: float):
    """Runs of [a, b] covering t_from -> t_to without straddling nodes.

    Yields (a, b, interval_index) in traversal order; b < a on backward runs.
    The interval index names the control value in force on the segment.
    """
    nodes = partition.nodes
    if t_to == t_from:
        return
    lo, hi = (t_from, t_to) if t_to > t_from else (t_to, t_from)
    inner = nodes[(nodes > lo) & (nodes < hi)]
    cuts = np.concatenate(([lo], inner, [hi]))
    if t_to < t_from:
        cuts = cuts[::-1]
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + b)
        yield float(a), float(b), partition.interval_index(mid)


def integrate_flow(
    field: ParametricField,
    control: ControlSignal,
    seed,
    t_from: float,
    t_to: float,
    substeps: int,
    blowup: float = DEFAULT_BLOWUP,
):
    """RK4 approximation of X_{t_from, t_to}(seed), forward or backward.

    ``substeps`` is the number of RK4 steps spent on each control interval
    (partial intervals get the same count).  ``seed`` may be a single point
    (n,) or a batch (M, n); the return matches.
    """
    horizon = control.partition.horizon
    for t in (t_from, t_to):
        if t < 0.0 or t > horizon:
            raise ValueError(f"time {t} outside [0, {horizon}]")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x, single = _as_batch(seed)
    for a, b, i in _segments(control.partition, t_from, t_to):
        h = (b - a) / substeps
        x = rk4_steps(field, control.values[i], x, h, substeps, a, blowup)
    return x[0] if single else x


@dataclass(frozen=True)
class FlowRecord:
    """Forward states and anchored Jacobians along partition nodes.

    states[i] holds X_{0, t_i}(seed) per seed; jacobians[i] holds J_{t_i, T}
    evaluated at states[i].  The anchor is the final node T, where the
    Jacobian is the identity; at t_0 = 0 the state equals the seed.
    """

    partition: TimePartition
    anchor_time: float
    states: np.ndarray
    jacobians: np.ndarray

    def __post_init__(self):
        n_nodes = self.partition.nodes.size
        if self.anchor_time != self.partition.horizon:
            raise ValueError("anchor must be the final partition node")
        if self.states.shape[0] != n_nodes or self.jacobians.shape[0] != n_nodes:
            raise ValueError("need one state and one Jacobian per node")
        n = self.states.shape[-1]
        if self.jacobians.shape[-2:] != (n, n):
            raise ValueError("Jacobian shape does not match the state dimension")
        if not np.array_equal(self.jacobians[-1], np.broadcast_to(np.eye(n), self.jacobians[-1].shape)):
            raise ValueError("the Jacobian at the anchor node must be the identity")

    @property
    def n_seeds(self) -> int:
        return self.states.shape[1]


def _even(substeps: int) -> int:
    # the backward Jacobian sweep consumes forward states in pairs
    return substeps + (substeps % 2)


def _forward_path(field, control, seeds, start_node, substeps, blowup):
    """Forward states from node ``start_node`` to T, stored at every substep.

    Returns an array of shape ((N - start_node) * substeps + 1, M, n); entry
    substeps * k is the state at node start_node + k.
    """
    part = control.partition
    widths = part.widths
    x, _ = _as_batch(seeds)
    n_int = part.n_intervals - start_node
    path = np.empty((n_int * substeps + 1,) + x.shape)
    path[0] = x
    pos = 1
    for i in range(start_node, part.n_intervals):
        h = widths[i] / substeps
        x = rk4_steps(field, control.values[i], x, h, substeps,
                      float(part.nodes[i]), blowup, out=path[pos:pos + substeps])
        pos += substeps
    return path


def _backward_jacobians(field, control, path, start_node, substeps, keep_nodes):
    """Integrate dJ/dt = -J A(t) backward from J(T) = I along a stored path.

    Each backward RK4 step spans two stored forward substeps, so its stages
    land exactly on stored states (``substeps`` must be even).  With
    ``keep_nodes`` the per-node Jacobians are returned (anchor last);
    otherwise only J at the start node.
    """
    part = control.partition
    widths = part.widths
    m, n = path.shape[1:]
    jac = np.broadcast_to(np.eye(n), (m, n, n)).copy()
    n_int = part.n_intervals - start_node
    out = None
    if keep_nodes:
        out = np.empty((n_int + 1, m, n, n))
        out[-1] = jac
    for i in range(part.n_intervals - 1, start_node - 1, -1):
        h2 = 2.0 * widths[i] / substeps
        base = (i - start_node) * substeps
        seg = path[base:base + substeps + 1]
        a_seg = field.jacobian_x(seg, control.values[i])
        for k in range(substeps, 0, -2):
            a_hi = a_seg[k]
            a_mid = a_seg[k - 1]
            a_lo = a_seg[k - 2]
            k1 = -np.einsum("mij,mjk->mik", jac, a_hi)
            k2 = -np.einsum("mij,mjk->mik", jac - (0.5 * h2) * k1, a_mid)
            k3 = -np.einsum("mij,mjk->mik", jac - (0.5 * h2) * k2, a_mid)
            k4 = -np.einsum("mij,mjk->mik", jac - h2 * k3, a_lo)
            jac = jac - (h2 / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if keep_nodes:
            out[i - start_node] = jac
    return out if keep_nodes else jac


def integrate_jacobian_to_anchor(
    field: ParametricField,
    control: ControlSignal,
    seeds,
    anchor: float | None = None,
    partition: TimePartition | None = None,
    substeps: int = 20,
    blowup: float = DEFAULT_BLOWUP,
) -> FlowRecord:
    """Forward states and backward Jacobians J_{t,T} for a batch of seeds.

    The forward trajectory of each seed is integrated over the control
    partition, then the Jacobian problem is integrated backward from the
    identity at the anchor T along the stored trajectory.
    """
    part = control.partition if partition is None else partition
    if not np.array_equal(part.nodes, control.partition.nodes):
        raise ConfigurationError("record partition must match the control partition")
    if anchor is None:
        anchor = part.horizon
    if anchor != part.horizon:
        raise ConfigurationError("the anchor must be the final time T")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    substeps = _even(substeps)
    seeds_arr, _ = _as_batch(seeds)
    path = _forward_path(field, control, seeds_arr, 0, substeps, blowup)
    jacs = _backward_jacobians(field, control, path, 0, substeps, keep_nodes=True)
    states = path[::substeps].copy()
    return FlowRecord(part, float(anchor), states, jacs)


def flow_segment_to_anchor(
    field: ParametricField,
    control: ControlSignal,
    points,
    start_node: int,
    substeps: int,
    blowup: float = DEFAULT_BLOWUP,
) -> tuple[np.ndarray, np.ndarray]:
    """X_{t_i, T}(points) and J_{t_i, T}(points) for arbitrary points at node i.

    This is the workhorse of the increment formula: it evaluates the
    reference segment flow and its Jacobian seeded at the current (generally
    off-reference) particle positions.  Returns (terminal points, Jacobians).
    """
    part = control.partition
    if not 0 <= start_node <= part.n_intervals:
        raise ValueError("start node outside the partition")
    pts, _ = _as_batch(points)
    if start_node == part.n_intervals:
        m, n = pts.shape
        return pts, np.broadcast_to(np.eye(n), (m, n, n)).copy()
    substeps = _even(substeps)
    path = _forward_path(field, control, pts, start_node, substeps, blowup)
    jac = _backward_jacobians(field, control, path, start_node, substeps, keep_nodes=False)
    return path[-1].copy(), jac


def inverse_flow_time_derivative(record: FlowRecord, field_value_at_t, node: int):
    """Time derivative of the inverse flow, -J_{t,T} V_t, at a stored node.

    ``field_value_at_t`` is the field value V_t; a single (n,) vector is
    applied to every stored seed.  Diagnostic companion of the increment
    formula.
    """
    if not 0 <= node < record.states.shape[0]:
        raise ValueError("node outside the partition")
    v = np.asarray(field_value_at_t, dtype=float)
    single = v.ndim == 1
    vb = np.broadcast_to(v, record.states[node].shape)
    out = -np.einsum("mij,mj->mi", record.jacobians[node], vb)
    return out[0] if single and record.n_seeds == 1 else out
