"""Cost functionals on measures with flat and intrinsic derivatives.

Every cost ships three evaluators: the value, the flat derivative (the
limit of convex perturbations toward a point mass), and the intrinsic
derivative (the state gradient of the flat derivative).  The intrinsic
derivative represents directional derivatives along pushforward
perturbations,

    d/dl value((id + l f)# mu) |_{l=0}  =  integral of intrinsic . f  d mu,

which is the identity the increment formula rests on.  All intrinsic
derivatives here are closed-form; the finite-difference definitions serve
only as test oracles.

Derivative evaluators take (measure, x) with x a single point (n,) or a
batch (Q, n) and return matching shapes.  Grid measures are evaluated by
cell-center quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ControlSignal, GridMeasure, ParticleMeasure, moments
from .errors import ConfigurationError

_PAIR_CHUNK = 512  # rows per chunk when broadcasting particle pairs


@dataclass(frozen=True)
class Functional:
    """A cost on probability measures bundled with its derivative evaluators."""

    value: Callable
    flat_derivative: Callable
    intrinsic_derivative: Callable


def _measure_arrays(measure) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(measure, GridMeasure):
        w = measure.density * measure.cell_volume
        return measure.centers(), w / np.sum(w)
    return measure.points, measure.weights


def targeting_functional(target) -> Functional:
    """Mean squared distance to a fixed target point."""
    t = np.atleast_1d(np.asarray(target, dtype=float))
    if not np.all(np.isfinite(t)):
        raise ValueError("target must be finite")

    def value(mu) -> float:
        pts, w = _measure_arrays(mu)
        d = pts - t
        return float(w @ np.einsum("mi,mi->m", d, d))

    def flat(mu, x):
        d = np.asarray(x, dtype=float) - t
        return np.einsum("...i,...i->...", d, d)

    def intrinsic(mu, x):
        return 2.0 * (np.asarray(x, dtype=float) - t)

    return Functional(value, flat, intrinsic)


def tracking_functional(
    target_mean,
    target_variance: float,
    psi1: Callable,
    psi1_grad: Callable,
    psi2: Callable,
    psi2_deriv: Callable,
) -> Functional:
    """Penalized deviation of the expectation and variance from targets.

    value(mu) = psi1(E(mu) - target_mean) + psi2(V(mu) - target_variance)
    with differentiable penalties psi1: R^n -> R and psi2: R -> R supplied
    together with their gradient/derivative.
    """
    e_hat = np.atleast_1d(np.asarray(target_mean, dtype=float))
    v_hat = float(target_variance)

    def value(mu) -> float:
        mean, var = moments(mu)
        return float(psi1(mean - e_hat)) + float(psi2(var - v_hat))

    def flat(mu, x):
        x = np.asarray(x, dtype=float)
        mean, var = moments(mu)
        g1 = np.asarray(psi1_grad(mean - e_hat), dtype=float)
        s2 = float(psi2_deriv(var - v_hat))
        m2 = var + float(mean @ mean)
        xx = np.einsum("...i,...i->...", x, x)
        return np.einsum("...i,i->...", x - mean, g1) + s2 * (
            xx - m2 - 2.0 * np.einsum("...i,i->...", x, mean) + 2.0 * float(mean @ mean)
        )

    def intrinsic(mu, x):
        x = np.asarray(x, dtype=float)
        mean, var = moments(mu)
        g1 = np.asarray(psi1_grad(mean - e_hat), dtype=float)
        s2 = float(psi2_deriv(var - v_hat))
        return g1 + 2.0 * s2 * (x - mean)

    return Functional(value, flat, intrinsic)


def _check_symmetry(kernel, pts: np.ndarray) -> None:
    sub = pts[: min(len(pts), 16)]
    k = np.asarray(kernel(sub[:, None, :], sub[None, :, :]), dtype=float)
    gap = float(np.max(np.abs(k - k.T))) if k.size else 0.0
    if gap > 1e-12:
        raise ConfigurationError(f"interaction kernel is asymmetric (gap {gap:.3e})")


def interaction_functional(kernel, kernel_gradient, weight: float) -> Functional:
    """Pairwise interaction energy (weight / 2) * double integral of g.

    ``kernel(x, y)`` must be symmetric and broadcast over paired batches
    ((..., n), (..., n)) -> (...); ``kernel_gradient`` is its gradient in the
    first argument with output (..., n).  The intrinsic derivative is
    weight * integral of kernel_gradient(x, .) d mu (the symmetry factor 2
    cancels the 1/2).
    """
    beta = float(weight)

    def _mean_kernel(pts, w, queries):
        out = np.empty(queries.shape[0])
        for lo in range(0, queries.shape[0], _PAIR_CHUNK):
            hi = min(lo + _PAIR_CHUNK, queries.shape[0])
            k = np.asarray(kernel(queries[lo:hi, None, :], pts[None, :, :]), dtype=float)
            out[lo:hi] = k @ w
        return out

    def value(mu) -> float:
        pts, w = _measure_arrays(mu)
        _check_symmetry(kernel, pts)
        return 0.5 * beta * float(w @ _mean_kernel(pts, w, pts))

    def flat(mu, x):
        pts, w = _measure_arrays(mu)
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        q = np.atleast_2d(x)
        double = float(w @ _mean_kernel(pts, w, pts))
        out = beta * (_mean_kernel(pts, w, q) - double)
        return float(out[0]) if single else out

    def intrinsic(mu, x):
        pts, w = _measure_arrays(mu)
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        q = np.atleast_2d(x)
        out = np.empty_like(q)
        for lo in range(0, q.shape[0], _PAIR_CHUNK):
            hi = min(lo + _PAIR_CHUNK, q.shape[0])
            g = np.asarray(kernel_gradient(q[lo:hi, None, :], pts[None, :, :]), dtype=float)
            out[lo:hi] = beta * np.einsum("qmn,m->qn", g, w)
        return out[0] if single else out

    return Functional(value, flat, intrinsic)


def sum_functionals(parts: Sequence[Functional], coefficients: Sequence[float]) -> Functional:
    """Coefficient-weighted sum of functionals (values and both derivatives)."""
    if len(parts) == 0:
        raise ValueError("need at least one functional")
    if len(parts) != len(coefficients):
        raise ValueError("one coefficient per functional required")
    parts = tuple(parts)
    coeffs = tuple(float(c) for c in coefficients)

    def value(mu) -> float:
        return sum(c * f.value(mu) for f, c in zip(parts, coeffs))

    def flat(mu, x):
        total = coeffs[0] * np.asarray(parts[0].flat_derivative(mu, x), dtype=float)
        for f, c in zip(parts[1:], coeffs[1:]):
            total = total + c * np.asarray(f.flat_derivative(mu, x), dtype=float)
        return total

    def intrinsic(mu, x):
        total = coeffs[0] * np.asarray(parts[0].intrinsic_derivative(mu, x), dtype=float)
        for f, c in zip(parts[1:], coeffs[1:]):
            total = total + c * np.asarray(f.intrinsic_derivative(mu, x), dtype=float)
        return total

    return Functional(value, flat, intrinsic)


def energy_cost(control: ControlSignal, alpha: float) -> float:
    """Quadratic control energy (alpha / 2) * integral of |u|^2 dt, exactly."""
    if alpha < 0.0:
        raise ValueError("the energy weight must be nonnegative")
    sq = np.einsum("ij,ij->i", control.values, control.values)
    return 0.5 * alpha * float(sq @ control.partition.widths)
