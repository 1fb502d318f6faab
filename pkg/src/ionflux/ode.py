"""Embedded Dormand-Prince 5(4) integration with quartic dense output.

The propagating solution is fifth order; the embedded fourth-order solution
supplies the local error estimate.  Step sizes follow a PI controller on the
mixed absolute/relative error norm, the first step is chosen automatically
from the local derivative scale, and values at requested points inside an
accepted step come from the standard fourth-degree interpolant (locally
fifth-order accurate), so the integrator never has to land on output points.

A fixed-step mode with no error control exists for convergence-order studies
and for the exact discrete-backprop gradient cross-check: it takes uniform
steps of the requested size and shortens only the final step of each segment
to land exactly on the next output point.

States may be arrays of any shape; the error norm runs over all entries.
Integration works in either time direction (the backward direction carries
the adjoint system).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationFailureError, InvalidInputError

__all__ = ["IntegrationConfig", "integrate_targets"]


# Seven-stage tableau (Dormand & Prince 1980).  Row i holds the weights of
# the previous stages for stage i+2; the last row doubles as the fifth-order
# solution weights (first-same-as-last).
_C = (0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0)
_A = (
    (0.2,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0,
     -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0,
     11.0 / 84.0),
)
_B5 = _A[-1] + (0.0,)
# Difference between the fifth- and fourth-order weights.
_E = (
    71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0,
    -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0,
)
# Extra weights for the dense-output interpolant.
_D = (
    -12715105075.0 / 11282082432.0, 0.0, 87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0, 701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0, 69997945.0 / 29380423.0,
)

# PI controller constants (classic DOPRI5 tuning).
_BETA = 0.04
_EXPO1 = 0.2 - _BETA * 0.75
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0


@dataclass(frozen=True)
class IntegrationConfig:
    """Tolerances and stepping policy for one integration.

    ``dense=True`` reads output points off the in-step interpolant;
    ``dense=False`` forces the integrator to step exactly onto each output
    point instead.  ``fixed_step`` switches off error control entirely and
    marches at the given uniform step size.
    """

    rtol: float = 1e-6
    atol: float = 1e-8
    initial_step: float | None = None
    max_steps: int = 100_000
    dense: bool = True
    fixed_step: float | None = None

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise InvalidInputError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be at least 1")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise InvalidInputError("fixed_step must be positive")
        if self.initial_step is not None and not self.initial_step > 0:
            raise InvalidInputError("initial_step must be positive")


def _error_norm(e, y_old, y_new, rtol, atol):
    sc = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return math.sqrt(float(np.mean((e / sc) ** 2)))


def _initial_step(f, t0, y0, f0, direction, span, rtol, atol):
    """Derivative-scale heuristic for the first trial step."""
    sc = atol + rtol * np.abs(y0)
    d0 = math.sqrt(float(np.mean((y0 / sc) ** 2)))
    d1 = math.sqrt(float(np.mean((f0 / sc) ** 2)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * direction * f0
    f1 = f(t0 + h0 * direction, y1)
    d2 = math.sqrt(float(np.mean(((f1 - f0) / sc) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, span)


def _step(f, t, y, h, k1):
    """One seven-stage step of signed size h; returns (y_new, err, stages)."""
    k = [k1]
    for ci, ai in zip(_C, _A):
        yi = y + h * sum(aij * kj for aij, kj in zip(ai, k))
        k.append(f(t + ci * h, yi))
    y_new = yi  # stage 7 evaluates at the fifth-order solution
    err = h * sum(ei * ki for ei, ki in zip(_E, k))
    return y_new, err, k


def _dense_eval(y_old, y_new, k, h, s):
    """Interpolant at fraction s of the step from y_old to y_new."""
    dy = y_new - y_old
    r1 = y_old
    r2 = dy
    r3 = h * k[0] - dy
    r4 = dy - h * k[6] - r3
    r5 = h * sum(di * ki for di, ki in zip(_D, k))
    return r1 + s * (r2 + (1.0 - s) * (r3 + s * (r4 + (1.0 - s) * r5)))


def _validate_targets(t0, targets):
    targets = [float(t) for t in targets]
    if not targets:
        raise InvalidInputError("at least one output point is required")
    rel = [t - t0 for t in targets]
    if all(r == 0.0 for r in rel):
        return targets, 1.0
    if any(r < 0 for r in rel) and any(r > 0 for r in rel):
        raise InvalidInputError("output points must lie on one side of t0")
    direction = 1.0 if rel[-1] > 0 else -1.0
    if any(b * direction < a * direction for a, b in zip(rel, rel[1:])):
        raise InvalidInputError("output points must move monotonically from t0")
    return targets, direction


def _fixed_march(f, t0, y0, targets, direction, step, max_steps):
    """Uniform steps, shortening only the step that lands on a target."""
    out = []
    t, y = t0, y0
    k1 = None
    n_steps = 0
    for tk in targets:
        while direction * (tk - t) > 1e-14 * max(1.0, abs(tk)):
            if n_steps >= max_steps:
                raise IntegrationFailureError(
                    f"exceeded {max_steps} steps at t = {t:.6e}",
                    last_t=t, last_state=y,
                )
            h = direction * min(step, direction * (tk - t))
            if k1 is None:
                k1 = f(t, y)
            y, _, k = _step(f, t, y, h, k1)
            if not np.all(np.isfinite(y)):
                raise IntegrationFailureError(
                    f"non-finite state at t = {t + h:.6e}",
                    last_t=t, last_state=y,
                )
            t += h
            k1 = k[6]
            n_steps += 1
        out.append(np.array(y, copy=True))
    return np.array(out), {"n_steps": n_steps, "n_rejected": 0}


def integrate_targets(f, t0, y0, targets, config=None):
    """Integrate dy/dt = f(t, y) from (t0, y0), sampling at the targets.

    Targets must move monotonically away from ``t0`` (either direction); a
    target equal to ``t0`` returns ``y0``.  Returns ``(ys, stats)`` where
    ``ys`` stacks one state per target and ``stats`` counts accepted and
    rejected steps.

    Raises :class:`IntegrationFailureError`, carrying the last reached time
    and state, when the step count runs out or the step size underflows.
    """
    if config is None:
        config = IntegrationConfig()
    y0 = np.asarray(y0, dtype=float)
    t0 = float(t0)
    targets, direction = _validate_targets(t0, targets)
    span = abs(targets[-1] - t0)

    n_lead = sum(1 for tk in targets if tk == t0)
    lead = [np.array(y0, copy=True) for _ in range(n_lead)]
    pending = targets[n_lead:]
    if not pending:
        return np.array(lead), {"n_steps": 0, "n_rejected": 0}

    if config.fixed_step is not None:
        ys, stats = _fixed_march(
            f, t0, y0, pending, direction, config.fixed_step, config.max_steps
        )
        return np.array(lead + list(ys)), stats

    rtol, atol = config.rtol, config.atol
    t, y = t0, y0
    k1 = f(t, y)
    if config.initial_step is not None:
        h_abs = min(float(config.initial_step), span)
    else:
        h_abs = _initial_step(f, t0, y0, k1, direction, span, rtol, atol)

    out = list(lead)
    next_i = 0
    fac_old = 1e-4
    rejected_last = False
    n_steps = n_rejected = 0
    t_end = targets[-1]

    while next_i < len(pending):
        if n_steps + n_rejected >= config.max_steps:
            raise IntegrationFailureError(
                f"exceeded {config.max_steps} steps at t = {t:.6e}",
                last_t=t, last_state=y,
            )
        h_abs = min(h_abs, abs(t_end - t))
        if not config.dense:
            h_abs = min(h_abs, abs(pending[next_i] - t))
        if t + direction * h_abs == t:
            raise IntegrationFailureError(
                f"step size underflow at t = {t:.6e}",
                last_t=t, last_state=y,
            )
        h = direction * h_abs
        y_new, e, k = _step(f, t, y, h, k1)
        if not np.all(np.isfinite(y_new)):
            err = 2.0  # treat as a rejection and retry smaller
        else:
            err = _error_norm(e, y, y_new, rtol, atol)

        if err <= 1.0:
            t_new = t + h
            while next_i < len(pending) and (
                direction * (pending[next_i] - t_new) <= 1e-14 * max(1.0, abs(t_new))
            ):
                s = (pending[next_i] - t) / h
                if config.dense and 0.0 < s < 1.0:
                    out.append(_dense_eval(y, y_new, k, h, s))
                else:
                    out.append(np.array(y_new, copy=True))
                next_i += 1
            fac11 = err ** _EXPO1
            fac = fac11 / fac_old ** _BETA
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac / _SAFETY))
            h_next = h_abs / fac
            if rejected_last:
                h_next = min(h_next, h_abs)
            fac_old = max(err, 1e-4)
            t, y, k1 = t_new, y_new, k[6]
            h_abs = h_next
            rejected_last = False
            n_steps += 1
        else:
            fac11 = err ** _EXPO1
            h_abs = h_abs / min(1.0 / _FAC_MIN, fac11 / _SAFETY)
            rejected_last = True
            n_rejected += 1

    return np.array(out), {"n_steps": n_steps, "n_rejected": n_rejected}
