"""Charge-conserving neural ODE over volume flux.

The model treats the permeate concentration vector as a state h(J_v) evolving
with flux: h(0) is the feed (zero rejection at zero flux) and dh/dJ_v is a
five-layer perceptron of the masked state and a polynomial encoding of the
flux coordinate.  The raw network output is masked and orthogonally projected
onto the electroneutral hyperplane before it enters the integrator, so the
dynamics are tangent to the constraint manifold and every state along the
trajectory carries exactly the feed's (zero) net charge, at any flux, by
construction rather than by penalty.

Internally the state and the flux coordinate are normalized by per-model
reference scales before they reach the network, which keeps activations and
tolerances O(1); all public inputs and outputs are physical (mol/m^3, m/s).

Gradients come from the continuous adjoint: one augmented system carrying
(state, cotangent, parameter gradient) is integrated backward through the
same Dormand-Prince scheme, with the loss cotangent added at each output
flux.  An exact discrete backprop through fixed solver steps exists for
cross-validating the adjoint in tests.
"""

from __future__ import annotations

import base64
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import mlp
from .chem import MixtureState
from .errors import (
    DegenerateProjectionError,
    InvalidInputError,
    NumericalOverflowError,
    UnsupportedSpeciesError,
)
from .ode import IntegrationConfig, integrate_targets

__all__ = [
    "ModelState",
    "new_model",
    "positional_encoding",
    "vector_field",
    "integrate",
    "adjoint_gradients",
    "discrete_gradients",
    "predict_rejection",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "ionflux-model"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelState:
    """Immutable bundle of parameters, architecture, and normalization.

    ``species`` fixes the meaning of each state slot; ``z`` are the matching
    valences.  ``jv_scale`` and ``c_scale`` are the flux and concentration
    normalization constants baked in at creation time.
    """

    theta: np.ndarray
    species: tuple
    z: np.ndarray
    p: int
    width: int
    n_layers: int
    jv_scale: float
    c_scale: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "species", tuple(str(s) for s in self.species))
        if self.z.shape != (len(self.species),):
            raise InvalidInputError("valence vector must match the species list")
        if self.p < 1:
            raise InvalidInputError("encoding order must be at least 1")
        if not (self.jv_scale > 0 and self.c_scale > 0):
            raise InvalidInputError("normalization scales must be positive")
        expected = mlp.param_count(self.d + self.p, self.d, self.width, self.n_layers)
        if self.theta.shape != (expected,):
            raise InvalidInputError(
                f"parameter vector has {self.theta.size} entries, "
                f"architecture needs {expected}"
            )

    @property
    def d(self) -> int:
        return len(self.species)

    @property
    def param_count(self) -> int:
        return int(self.theta.size)

    @property
    def sizes(self):
        return mlp.layer_sizes(self.d + self.p, self.d, self.width, self.n_layers)

    def with_theta(self, theta) -> "ModelState":
        return replace(self, theta=np.asarray(theta, dtype=float))


def new_model(
    species,
    valences,
    width: int = 588,
    p: int = 4,
    n_layers: int = 5,
    jv_scale: float = 3e-5,
    c_scale: float = 1000.0,
    seed: int = 0,
) -> ModelState:
    """Fresh model; the zero-initialized last layer makes it the zero field.

    The default width lands the five-layer stack at 1,051,352 parameters for
    eight species with a fourth-order encoding (about 1.05 million).
    """
    species = tuple(str(s) for s in species)
    d = len(species)
    rng = np.random.default_rng(seed)
    theta = mlp.init_params(d + p, d, width, rng, n_layers)
    return ModelState(
        theta=theta, species=species, z=np.asarray(valences, dtype=float),
        p=p, width=width, n_layers=n_layers,
        jv_scale=float(jv_scale), c_scale=float(c_scale), seed=int(seed),
    )


def positional_encoding(jv: float, jv_scale: float, p: int = 4) -> np.ndarray:
    """Powers [u, u^2, ..., u^p] of the normalized flux u = J_v / jv_scale."""
    if not jv_scale > 0:
        raise InvalidInputError("jv_scale must be positive")
    u = float(jv) / float(jv_scale)
    if u < 0.0 or u > 1.0:
        warnings.warn(
            f"flux {jv:.3e} is outside the encoding range [0, {jv_scale:.3e}]; "
            "extrapolating", stacklevel=2,
        )
    return _encode(u, p)


def _encode(u: float, p: int) -> np.ndarray:
    return u ** np.arange(1, p + 1, dtype=float)


def _project_rows(v, z, m):
    """Row-wise orthogonal projection onto z_m . v = 0 (batched masks allowed)."""
    zm = z * m
    denom = np.sum(zm * zm, axis=-1, keepdims=True)
    if np.any(denom == 0.0):
        raise DegenerateProjectionError("a row's masked valence vector is identically zero")
    coef = np.sum(v * zm, axis=-1, keepdims=True) / denom
    return v - coef * zm


def _as_batch(arr, d, name):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        if arr.shape != (d,):
            raise InvalidInputError(f"{name} must have {d} entries")
        return arr[None, :], True
    if arr.ndim == 2 and arr.shape[1] == d:
        return arr, False
    raise InvalidInputError(f"{name} must be (d,) or (batch, {d})")


def _mask_rows(mask, batch_shape, d):
    if mask is None:
        return np.ones(batch_shape, dtype=float)
    m = np.asarray(mask, dtype=float)
    if m.ndim == 1:
        m = np.broadcast_to(m, batch_shape).copy()
    if m.shape != batch_shape:
        raise InvalidInputError("mask shape must match the state batch")
    return m


def _field_normalized(model: ModelState, y, u: float, m):
    """dy/du for normalized state y and flux fraction u; masked and tangent."""
    enc = _encode(u, model.p)
    x = np.concatenate([y * m, np.broadcast_to(enc, (y.shape[0], model.p))], axis=1)
    raw, cache = mlp.forward(model.theta, x, model.sizes)
    if not np.all(np.isfinite(raw)):
        raise NumericalOverflowError(
            f"non-finite network output at normalized flux {u:.4f}"
        )
    return _project_rows(raw * m, model.z, m), cache


def vector_field(model: ModelState, h, jv: float, mask=None) -> np.ndarray:
    """dh/dJ_v at (h, J_v): masked network output projected tangent to z_m.h=0."""
    hb, squeeze = _as_batch(h, model.d, "state")
    m = _mask_rows(mask, hb.shape, model.d)
    u = float(jv) / model.jv_scale
    f, _ = _field_normalized(model, hb / model.c_scale, u, m)
    f = f * (model.c_scale / model.jv_scale)
    return f[0] if squeeze else f


def _prepare(model, h0, targets, mask):
    hb, squeeze = _as_batch(h0, model.d, "initial state")
    m = _mask_rows(mask, hb.shape, model.d)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 1 or targets.size == 0:
        raise InvalidInputError("targets must be a non-empty 1-D sequence")
    if np.any(targets < 0):
        raise InvalidInputError("flux targets must be non-negative")
    if np.any(np.diff(targets) < 0):
        raise InvalidInputError("flux targets must be ascending")
    if targets[-1] > model.jv_scale:
        warnings.warn(
            f"flux {targets[-1]:.3e} exceeds the encoding range "
            f"[0, {model.jv_scale:.3e}]; extrapolating", stacklevel=3,
        )
    y0 = _project_rows((hb * m) / model.c_scale, model.z, m)
    taus = targets / model.jv_scale
    return y0, m, taus, squeeze


def integrate(model: ModelState, h0, targets, config=None, mask=None) -> np.ndarray:
    """States h(J_v) at ascending flux targets, starting from h(0) = h0.

    Returns (T, d) for a single state or (T, B, d) for a batch; the row for
    a zero target is h0 itself (after masking and the defensive projection).
    """
    if config is None:
        config = IntegrationConfig()
    y0, m, taus, squeeze = _prepare(model, h0, targets, mask)

    def f(tau, y):
        return _field_normalized(model, y, tau, m)[0]

    ys, _ = integrate_targets(f, 0.0, y0, taus, config)
    hs = ys * model.c_scale
    return hs[:, 0, :] if squeeze else hs


def _vjp_field(model, y, u, m, a):
    """f(y,u), a^T df/dy, and a^T df/dtheta in one forward + reverse pass."""
    f, cache = _field_normalized(model, y, u, m)
    graw = _project_rows(a, model.z, m) * m
    gtheta, gx = mlp.vjp(model.theta, cache, graw, model.sizes)
    gy = gx[:, :model.d] * m
    return f, gy, gtheta


def adjoint_gradients(model: ModelState, h0, targets, loss_grads,
                      config=None, mask=None):
    """(dL/dtheta, dL/dh0) for L = sum_k l_k(h(J_v,k)) given dl_k/dh.

    The augmented system (h, a, g) runs backward from the last target to
    zero flux with the same integrator; each target adds its loss cotangent
    to a on the way down.  ``loss_grads`` stacks one cotangent per target
    (physical units), shaped like the forward output.
    """
    if config is None:
        config = IntegrationConfig()
    y0, m, taus, squeeze = _prepare(model, h0, targets, mask)
    B, d = y0.shape
    P = model.param_count

    g_list = np.asarray(loss_grads, dtype=float)
    if squeeze:
        if g_list.shape != (taus.size, d):
            raise InvalidInputError("loss_grads must be (targets, d)")
        g_list = g_list[:, None, :]
    elif g_list.shape != (taus.size, B, d):
        raise InvalidInputError("loss_grads must be (targets, batch, d)")
    # physical-to-normalized cotangent: h = c_scale * y
    g_list = g_list * model.c_scale

    def f(tau, y):
        return _field_normalized(model, y, tau, m)[0]

    ys, _ = integrate_targets(f, 0.0, y0, taus, config)

    nbd = B * d

    def aug(tau, s):
        y = s[:nbd].reshape(B, d)
        a = s[nbd:2 * nbd].reshape(B, d)
        fy, gy, gtheta = _vjp_field(model, y, tau, m, a)
        return np.concatenate([fy.ravel(), -gy.ravel(), -gtheta])

    y_cur = ys[-1]
    a = np.zeros((B, d))
    g = np.zeros(P)
    for k in range(taus.size - 1, -1, -1):
        a = a + g_list[k]
        t_hi = taus[k]
        t_lo = taus[k - 1] if k > 0 else 0.0
        if t_hi == t_lo:
            y_cur = ys[k - 1] if k > 0 else y_cur
            continue
        s0 = np.concatenate([y_cur.ravel(), a.ravel(), g])
        out, _ = integrate_targets(aug, t_hi, s0, [t_lo], config)
        s_end = out[0]
        a = s_end[nbd:2 * nbd].reshape(B, d)
        g = s_end[2 * nbd:]
        # restart the state leg from the forward solution to stop drift
        y_cur = ys[k - 1] if k > 0 else s_end[:nbd].reshape(B, d)

    gh0 = _project_rows(a, model.z, m) * m / model.c_scale
    return g, (gh0[0] if squeeze else gh0)


def discrete_gradients(model: ModelState, h0, targets, loss_grads,
                       step: float, mask=None):
    """Exact reverse pass through fixed-size solver steps; test oracle only.

    Marches the tableau at uniform normalized step ``step`` (shortening onto
    each target), records every stage, then backpropagates through the step
    arithmetic.  Agrees with the forward fixed-step trajectory to roundoff.
    """
    from .ode import _A, _B5, _C  # tableau shared with the integrator

    if not step > 0:
        raise InvalidInputError("step must be positive")
    y0, m, taus, squeeze = _prepare(model, h0, targets, mask)
    B, d = y0.shape

    g_list = np.asarray(loss_grads, dtype=float)
    if squeeze:
        g_list = g_list[:, None, :]
    g_list = g_list * model.c_scale

    def f(u, y):
        return _field_normalized(model, y, u, m)[0]

    steps = []          # (t, y, [k1..k7], h)
    emit_at = []        # index into steps after which each target is emitted
    t = 0.0
    y = y0
    for tk in taus:
        while tk - t > 1e-14 * max(1.0, tk):
            h = min(step, tk - t)
            ks = [f(t, y)]
            for ci, ai in zip(_C, _A):
                yi = y + h * sum(aij * kj for aij, kj in zip(ai, ks))
                ks.append(f(t + ci * h, yi))
            steps.append((t, y, ks, h))
            y = yi
            t += h
        emit_at.append(len(steps))

    gtheta = np.zeros(model.param_count)
    ga = np.zeros((B, d))
    for i in range(len(steps) - 1, -1, -1):
        for k, at in enumerate(emit_at):
            if at == i + 1:
                ga = ga + g_list[k]
        t, y, ks, h = steps[i]
        gk = [np.zeros((B, d)) for _ in range(7)]
        for j, bj in enumerate(_B5):
            gk[j] += h * bj * ga
        gy = ga.copy()
        for j in range(6, -1, -1):
            if j == 0:
                u_t, u_y = t, y
            else:
                u_t = t + _C[j - 1] * h
                u_y = y + h * sum(a_jl * kl for a_jl, kl in zip(_A[j - 1], ks))
            _, gu, gth = _vjp_field(model, u_y, u_t, m, gk[j])
            gtheta += gth
            gy += gu
            if j > 0:
                for l, a_jl in enumerate(_A[j - 1]):
                    gk[l] += h * a_jl * gu
        ga = gy
    for k, at in enumerate(emit_at):
        if at == 0:
            ga = ga + g_list[k]

    gh0 = _project_rows(ga, model.z, m) * m / model.c_scale
    return gtheta, (gh0[0] if squeeze else gh0)


def _align_feed(model: ModelState, feed: MixtureState):
    """Map the feed's active species onto model slots by name; strict valences."""
    slot = {name: i for i, name in enumerate(model.species)}
    h0 = np.zeros(model.d)
    m = np.zeros(model.d)
    placing = []
    for j in range(feed.d):
        if not feed.mask[j]:
            continue
        name = feed.species[j].name
        if name not in slot:
            raise UnsupportedSpeciesError(
                f"species {name!r} is not among the model's species "
                f"{list(model.species)}"
            )
        i = slot[name]
        if float(model.z[i]) != float(feed.species[j].z):
            raise UnsupportedSpeciesError(
                f"species {name!r} carries valence {feed.species[j].z}, "
                f"model slot expects {model.z[i]:g}"
            )
        h0[i] = feed.concentrations[j]
        m[i] = 1.0
        placing.append((j, i))
    if not placing:
        raise InvalidInputError("feed has no active species")
    return h0, m, placing


def predict_rejection(model: ModelState, feed: MixtureState, flux_grid,
                      config=None):
    """Rejection curve from the surrogate: rows (J_v, R per feed slot).

    R_i = 1 - h_i(J_v)/C_feed,i for the feed's active species (slots the
    feed masks out report 0).  Negative values are reported as computed;
    counter-ions in mixtures can be enriched in the permeate.
    """
    h0, m, placing = _align_feed(model, feed)
    grid = np.asarray(flux_grid, dtype=float)
    hs = integrate(model, h0, grid, config=config, mask=m)
    out = []
    for row_jv, h_row in zip(grid, hs):
        r = np.zeros(feed.d)
        for j, i in placing:
            r[j] = 1.0 - h_row[i] / feed.concentrations[j]
        out.append((float(row_jv), r))
    return out


def save_checkpoint(model: ModelState, path) -> None:
    """Versioned JSON checkpoint; parameters round-trip bit-exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "d": model.d, "p": model.p,
            "width": model.width, "n_layers": model.n_layers,
        },
        "normalization": {"jv_scale": model.jv_scale, "c_scale": model.c_scale},
        "species": list(model.species),
        "valences": [float(v) for v in model.z],
        "seed": model.seed,
        "theta_base64": base64.b64encode(
            np.ascontiguousarray(model.theta, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> ModelState:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"not a model checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"unsupported checkpoint version {payload.get('version')!r}"
        )
    arch = payload["architecture"]
    theta = np.frombuffer(
        base64.b64decode(payload["theta_base64"]), dtype="<f8"
    ).astype(float)
    return ModelState(
        theta=theta,
        species=tuple(payload["species"]),
        z=np.asarray(payload["valences"], dtype=float),
        p=int(arch["p"]), width=int(arch["width"]),
        n_layers=int(arch["n_layers"]),
        jv_scale=float(payload["normalization"]["jv_scale"]),
        c_scale=float(payload["normalization"]["c_scale"]),
        seed=int(payload["seed"]),
    )
