"""Steady-state multi-ion transport across a charged nanoporous layer.

The model couples three regions in series:

* a concentration-polarization film on the feed side, where ions move by
  unhindered diffusion, convection, and electromigration;
* the membrane active layer, treated as a bundle of cylindrical pores where
  the same fluxes are hindered by the finite solute-to-pore size ratio and a
  volumetric fixed charge enters the electroneutrality closure;
* equilibrium partitioning at both pore mouths combining steric, Born
  dielectric, and Donnan mechanisms.

At a prescribed volume flux the solute fluxes must equal ``C_p,i J_v``; the
permeate composition that makes the whole chain self-consistent is found by
a damped fixed-point iteration over the film + pore chain, with one linear
relaxation rule for the potential profile and one bounded multiplicative
rule for the permeate concentrations.  Convergence is declared on the
permeate vector jointly with the potential profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chem import MixtureState, MembraneParams, validate_feed
from .constants import CONSTANTS, PhysicalConstants
from ._kernels import donnan_root, march_domain, transport_fixed_point
from .errors import (
    FilmDivergenceError,
    InfeasiblePartitioningError,
    InvalidFlowError,
    InvalidInputError,
    IonfluxError,
    NonConvergenceError,
    NumericalBreakdownError,
)
from .thermo import (
    DONNAN_DPSI_MAX_V,
    DONNAN_RTOL,
    IDEAL,
    ActivityModel,
    activity_coefficients,
    dielectric_partition,
    hindrance_coefficients,
    solve_donnan,
    steric_partition,
)

__all__ = [
    "SolverConfig",
    "TransportSolution",
    "CurvePoint",
    "RejectionCurve",
    "mass_transfer",
    "film_thickness",
    "film_solve",
    "update_potential",
    "update_concentration",
    "pore_solve",
    "PoreResult",
    "solve_rejection",
    "default_flux_grid",
]


@dataclass(frozen=True)
class SolverConfig:
    """Numerical and hydrodynamic settings for the continuum solver."""

    n_grid: int = 64                       # cells per domain (film and pore)
    eta_psi: float = 0.10                  # potential-profile relaxation gain
    eta_c: float = 0.175                   # permeate-concentration relaxation gain
    tol_rel: float = 1e-6                  # relative change declaring convergence
    tol_en: float = 1e-8                   # electroneutrality residual tolerance
    max_iters: int = 50_000                # fixed-point iteration budget
    # Sherwood correlation Sh = a Re^b Sc^c and channel hydrodynamics.
    sherwood_a: float = 0.2
    sherwood_b: float = 0.57
    sherwood_c: float = 0.40
    reynolds: float = 500.0
    hydraulic_diameter_m: float = 1e-3
    kinematic_viscosity_m2_s: float = 8.93e-7
    # Reference diffusivity fixing the (species-independent) film thickness.
    reference_diffusivity_m2_s: float = 1.5e-9
    activity: ActivityModel = field(default_factory=lambda: IDEAL)

    def __post_init__(self):
        if self.n_grid < 8:
            raise InvalidInputError("n_grid must be at least 8")
        for name in ("eta_psi", "eta_c"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidInputError(f"{name} must lie in (0, 1], got {v}")
        for name in ("tol_rel", "tol_en"):
            if not getattr(self, name) > 0.0:
                raise InvalidInputError(f"{name} must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("iteration budget must be positive")


@dataclass(frozen=True)
class TransportSolution:
    """Converged state of one (feed, membrane, flux) transport problem.

    Potentials are reported relative to the external solution at the
    feed-side pore mouth: ``psi_V[0]`` equals the feed-side Donnan jump.
    ``dpsi_donnan_out_V`` is permeate-minus-pore-exit, so the full
    transmembrane potential is ``psi_V[-1] + dpsi_donnan_out_V``.
    """

    jv: float
    feed: MixtureState
    wall: MixtureState
    permeate: MixtureState
    x_m: np.ndarray                  # pore coordinate, 0 .. dx_e
    pore_profiles: np.ndarray        # (n+1, d) concentrations along the pore
    psi_V: np.ndarray                # (n+1,) potential along the pore
    film_x_m: np.ndarray             # film coordinate, -delta_f .. 0
    film_profiles: np.ndarray
    film_psi_V: np.ndarray
    dpsi_donnan_in_V: float
    dpsi_donnan_out_V: float
    ion_fluxes: np.ndarray           # C_p,i * J_v [mol m^-2 s^-1]
    rejections: np.ndarray           # observed, relative to the feed
    intrinsic_rejections: np.ndarray  # relative to the wall composition
    iterations: int
    converged: bool
    residuals: dict

    @property
    def transmembrane_potential_V(self) -> float:
        return float(self.psi_V[-1] + self.dpsi_donnan_out_V)


@dataclass(frozen=True)
class CurvePoint:
    jv: float
    rejections: np.ndarray
    permeate: MixtureState
    solution: TransportSolution


@dataclass(frozen=True)
class RejectionCurve:
    feed: MixtureState
    membrane: MembraneParams
    points: tuple[CurvePoint, ...]
    failures: tuple[tuple[float, str], ...] = ()

    @property
    def fluxes(self) -> np.ndarray:
        return np.array([p.jv for p in self.points])

    def rejection_matrix(self) -> np.ndarray:
        return np.array([p.rejections for p in self.points])


def default_flux_grid(n: int = 20, jv_max: float = 3e-5) -> np.ndarray:
    """Uniform volume-flux grid of ``n`` points on (0, jv_max]."""
    if n < 1 or not jv_max > 0:
        raise InvalidInputError("need n >= 1 and jv_max > 0")
    return np.linspace(jv_max / n, jv_max, n)


def mass_transfer(
    config: SolverConfig, diffusivity_m2_s: float
) -> tuple[float, float]:
    """Film mass-transfer coefficient and film thickness for one solute.

    Sh = a Re^b Sc^c on the channel hydraulic diameter; k = Sh D / d_h.  The
    film thickness is shared by all species and pinned to the configured
    reference diffusivity, delta_f = d_h / Sh(Sc_ref).
    """
    if config.reynolds <= 0:
        raise InvalidFlowError(
            f"Reynolds number must be positive, got {config.reynolds}"
        )
    if diffusivity_m2_s <= 0 or config.kinematic_viscosity_m2_s <= 0:
        raise InvalidFlowError("diffusivity and viscosity must be positive")
    sc = config.kinematic_viscosity_m2_s / diffusivity_m2_s
    sh = config.sherwood_a * config.reynolds ** config.sherwood_b * sc ** config.sherwood_c
    k = sh * diffusivity_m2_s / config.hydraulic_diameter_m
    sc_ref = config.kinematic_viscosity_m2_s / config.reference_diffusivity_m2_s
    sh_ref = (
        config.sherwood_a
        * config.reynolds ** config.sherwood_b
        * sc_ref ** config.sherwood_c
    )
    delta_f = config.hydraulic_diameter_m / sh_ref
    return k, delta_f


def film_thickness(config: SolverConfig) -> float:
    return mass_transfer(config, config.reference_diffusivity_m2_s)[1]


def update_potential(psi_prev, psi_new, eta_psi: float):
    """Linearly damped update psi <- psi + eta (psi_new - psi)."""
    psi_prev = np.asarray(psi_prev, dtype=float)
    psi_new = np.asarray(psi_new, dtype=float)
    if psi_prev.shape != psi_new.shape:
        raise InvalidInputError("potential profiles must have matching shapes")
    if not 0.0 < eta_psi <= 1.0:
        raise InvalidInputError(f"eta_psi must lie in (0, 1], got {eta_psi}")
    return psi_prev + eta_psi * (psi_new - psi_prev)


def update_concentration(c_prev, c_new, eta_c: float):
    """Bounded multiplicative concentration update.

    The raw step c_new - c_prev is scaled by eta_c and additionally capped at
    eta_c * c_prev in magnitude, so one update can never change a
    concentration by more than a factor (1 +/- eta_c); positive values stay
    positive for eta_c < 1.  Accepts scalars or arrays (elementwise).
    """
    if not 0.0 < eta_c <= 1.0:
        raise InvalidInputError(f"eta_c must lie in (0, 1], got {eta_c}")
    c_prev_arr = np.asarray(c_prev, dtype=float)
    c_new_arr = np.asarray(c_new, dtype=float)
    if np.any(c_prev_arr <= 0):
        raise InvalidInputError("previous concentrations must be positive")
    dc = c_new_arr - c_prev_arr
    step = np.where(
        np.abs(dc) > 0, np.minimum(np.abs(dc), c_prev_arr) * np.sign(dc), 0.0
    )
    out = c_prev_arr + eta_c * step
    if np.isscalar(c_prev) and out.ndim == 0:
        return float(out)
    return out


def _film_arrays(state: MixtureState):
    z = state.valences.astype(float)
    kc = np.where(state.mask, 1.0, 0.0)
    kdd = np.where(state.mask, state.diffusivities, 1.0)
    return z, kc, kdd


def film_solve(
    feed: MixtureState,
    permeate_guess,
    jv: float,
    config: SolverConfig,
    constants: PhysicalConstants = CONSTANTS,
    delta_f: float | None = None,
) -> MixtureState:
    """March the polarization film from the bulk feed to the membrane wall."""
    if jv < 0:
        raise InvalidInputError(f"volume flux must be non-negative, got {jv}")
    if isinstance(permeate_guess, MixtureState):
        cp = np.asarray(permeate_guess.concentrations, dtype=float)
    else:
        cp = np.asarray(permeate_guess, dtype=float)
    if cp.shape != (feed.d,):
        raise InvalidInputError("permeate guess width does not match the feed")
    if delta_f is None:
        delta_f = film_thickness(config)
    z, kc, kdd = _film_arrays(feed)
    cp = np.where(feed.mask, np.maximum(cp, 0.0), 0.0)
    profile, _, bad = march_domain(
        np.asarray(feed.concentrations, dtype=float),
        cp,
        z,
        kc,
        kdd,
        float(jv),
        float(delta_f),
        config.n_grid,
    )
    if bad >= 0:
        raise FilmDivergenceError(
            f"film march broke down at J_v = {jv:.3e} m/s", trace=profile
        )
    return feed.with_concentrations(profile[-1], jv=jv)


@dataclass(frozen=True)
class _PoreGeometry:
    """Per-slot transport factors for one (species set, membrane) pair."""

    include: np.ndarray     # fits in the pore and is masked in
    lam: np.ndarray
    kc: np.ndarray
    kdd: np.ndarray         # K_d * D, the hindered diffusivity
    a_tot: np.ndarray       # phi_steric * phi_dielectric


def _pore_geometry(
    state: MixtureState,
    membrane: MembraneParams,
    constants: PhysicalConstants,
) -> _PoreGeometry:
    d = state.d
    include = np.zeros(d, dtype=bool)
    lam = np.zeros(d)
    kc = np.zeros(d)
    kdd = np.ones(d)
    a_tot = np.zeros(d)
    for j, ion in enumerate(state.species):
        if not state.mask[j]:
            continue
        lam[j] = ion.stokes_radius_m / membrane.r_p_m
        if lam[j] >= 1.0:
            continue
        include[j] = True
        kd_j, kc_j = hindrance_coefficients(lam[j])
        kc[j] = kc_j
        kdd[j] = kd_j * ion.diffusivity_m2_s
        a_tot[j] = steric_partition(lam[j]) * dielectric_partition(
            ion, membrane, constants
        )
    return _PoreGeometry(include=include, lam=lam, kc=kc, kdd=kdd, a_tot=a_tot)


@dataclass(frozen=True)
class PoreResult:
    """Pore-side solution against a fixed wall composition."""

    dpsi_in_V: float
    dpsi_out_V: float
    c_in: np.ndarray
    profile: np.ndarray
    phi: np.ndarray                 # reduced potential along the pore
    permeate_conc: np.ndarray
    iterations: int
    residuals: dict


def _exit_partition(z, c_exit, geo, gamma_perm, u_max):
    active = geo.include & (c_exit > 0)
    b = np.where(
        active, c_exit / (np.where(active, geo.a_tot, 1.0) * gamma_perm), 0.0
    )
    w, res, ok = donnan_root(z, b, 0.0, u_max, DONNAN_RTOL)
    if not ok:
        raise InfeasiblePartitioningError(
            f"no neutral permeate in equilibrium with the pore exit "
            f"(residual {res:.3e})"
        )
    return w, np.where(active, b * np.exp(-z * w), 0.0)


def _reduced_u_max(constants: PhysicalConstants) -> float:
    return constants.F * DONNAN_DPSI_MAX_V / (constants.R_gas * constants.T)


@dataclass(frozen=True)
class _ChainState:
    wall: MixtureState
    dpsi_in_V: float
    c_in: np.ndarray
    profile: np.ndarray
    phi: np.ndarray


def _chain_once(
    feed: MixtureState,
    cp: np.ndarray,
    jv: float,
    membrane: MembraneParams,
    config: SolverConfig,
    constants: PhysicalConstants,
    geo: _PoreGeometry,
    delta_f: float,
) -> tuple[_ChainState | None, int]:
    """One film + entrance + pore sweep.

    Returns (state, -1) on success and (None, bad) on a march breakdown,
    where bad is the offending ion index.
    """
    z, kc_f, kdd_f = _film_arrays(feed)
    if delta_f > 0.0:
        film, _, bad = march_domain(
            np.asarray(feed.concentrations, dtype=float),
            cp, z, kc_f, kdd_f, float(jv), float(delta_f), config.n_grid,
        )
        if bad >= 0:
            return None, bad
        wall = feed.with_concentrations(film[-1], jv=jv)
    else:
        wall = feed
    gamma_wall = activity_coefficients(wall, config.activity, constants)
    dpsi_in, c_in = solve_donnan(wall, gamma_wall, membrane, constants)
    profile, phi, bad = march_domain(
        c_in, cp, z, geo.kc, geo.kdd, float(jv), membrane.dx_e_m, config.n_grid
    )
    if bad >= 0:
        return None, bad
    return _ChainState(
        wall=wall, dpsi_in_V=dpsi_in, c_in=c_in, profile=profile, phi=phi
    ), -1


def _joint_python(
    feed: MixtureState,
    cp0: np.ndarray,
    active: np.ndarray,
    jv: float,
    membrane: MembraneParams,
    config: SolverConfig,
    constants: PhysicalConstants,
    geo: _PoreGeometry,
    delta_f: float,
) -> tuple[np.ndarray, int]:
    """Python twin of the compiled fixed-point loop for non-ideal activity.

    The permeate-side activity coefficients are refreshed from the current
    iterate every chain evaluation (one sweep of lag, absorbed by the
    damping).  Same staging as the compiled path: a single-ray root for
    charged two-ion systems, damped sweeps with feasibility and gain
    safeguards, then the partitioned slave/Newton iteration when the
    sweeps stall.
    """
    d = feed.d
    z = feed.valences.astype(float)
    u_max = _reduced_u_max(constants)
    budget = config.max_iters
    evals = 0
    idx = np.flatnonzero(active)
    da = idx.size

    def chain_eval(vec: np.ndarray) -> tuple[_ChainState | None, int]:
        nonlocal evals
        evals += 1
        return _chain_once(feed, vec, jv, membrane, config, constants, geo, delta_f)

    def candidate(vec: np.ndarray, chain: _ChainState):
        gamma_perm = activity_coefficients(
            feed.with_concentrations(vec, jv=jv), config.activity, constants
        )
        return _exit_partition(z, chain.profile[-1], geo, gamma_perm, u_max)

    def eval_h(vec: np.ndarray):
        """One chain evaluation reduced to h = ln(G(cp) / cp).

        Returns (h, -1, chain) on success; (None, bad, None) otherwise with
        bad >= 0 blaming a march ion, -1 an infeasible entrance, -2 an
        infeasible or collapsed exit partition.
        """
        try:
            ch, bad = chain_eval(vec)
        except InfeasiblePartitioningError:
            return None, -1, None
        if ch is None:
            return None, bad, None
        try:
            _, cand = candidate(vec, ch)
        except InfeasiblePartitioningError:
            return None, -2, None
        if np.any(cand[idx] <= 0.0):
            return None, -2, None
        h = np.zeros(d)
        h[idx] = np.log(cand[idx] / vec[idx])
        return h, -1, ch

    def scalar_root(vec, g, t0=0.05, f_tol=1e-7):
        """Root of h along a log-space ray: bracket expansion + Illinois.

        g is an ion index or a group scaled jointly by e^t; the residual is
        h at the leading index.  Stops on the residual, not the bracket
        width; a bracket collapsed to adjacent floats is converged in the
        unknown itself (the residual is not representable there) and is
        reported via the at_floor flag.  Returns (value(s), parked_f,
        at_floor) or None; own-coordinate halving only cures infeasibility
        this ray causes, so blame repeatedly lying elsewhere fails fast.
        """
        one = np.ndim(g) == 0
        g = np.atleast_1d(np.asarray(g, dtype=int))
        lead = g[0]
        out = (lambda v: float(v[0])) if one else (lambda v: v)
        base = vec
        h0, bad, _ = eval_h(base)
        if h0 is None:
            w = base.copy()
            misses = 0
            for _ in range(120):
                w[g] *= 0.5
                h0, bad, _ = eval_h(w)
                if h0 is not None:
                    break
                if bad >= 0 and bad not in g:
                    misses += 1
                    if misses >= 4:
                        return None
                else:
                    misses = 0
            if h0 is None:
                return None
            base = w
        f0 = h0[lead]
        if abs(f0) <= f_tol:
            return out(base[g]), f0, False
        if f0 > 0:
            t_lo, f_lo = 0.0, f0
            t, t_hi, f_hi = t0, None, None
            for _ in range(80):
                w = base.copy()
                w[g] = base[g] * np.exp(t)
                h_t, _, _ = eval_h(w)
                if h_t is None or h_t[lead] <= 0:
                    t_hi = t
                    f_hi = None if h_t is None else h_t[lead]
                    break
                t_lo, f_lo = t, h_t[lead]
                t *= 4
                if t > 60.0:
                    return None
            if t_hi is None:
                return None
        else:
            t_hi, f_hi = 0.0, f0
            t, t_lo, f_lo = -t0, None, None
            for _ in range(80):
                w = base.copy()
                w[g] = base[g] * np.exp(t)
                h_t, _, _ = eval_h(w)
                if h_t is not None and h_t[lead] > 0:
                    t_lo, f_lo = t, h_t[lead]
                    break
                t *= 4
                if t < -60.0:
                    return None
            if t_lo is None:
                return None
        best_t, best_f = t_lo, f_lo
        last = 0
        at_floor = False
        for _ in range(160):
            width = t_hi - t_lo
            if abs(best_f) <= f_tol:
                break
            # machine floor: the two endpoints are adjacent floats, so the
            # root itself sits between them; certified converged in x
            if not (base[lead] * math.exp(t_lo) < base[lead] * math.exp(t_hi)):
                at_floor = True
                break
            if f_hi is not None and np.isfinite(f_hi) and f_hi < 0:
                tm = (t_lo * f_hi - t_hi * f_lo) / (f_hi - f_lo)
                pad = 0.01 * width
                if not (t_lo + pad <= tm <= t_hi - pad):
                    tm = 0.5 * (t_lo + t_hi)
            else:
                tm = 0.5 * (t_lo + t_hi)
            if tm <= t_lo or tm >= t_hi:
                tm = 0.5 * (t_lo + t_hi)
                if tm <= t_lo or tm >= t_hi:
                    at_floor = True
                    break
            w = base.copy()
            w[g] = base[g] * np.exp(tm)
            h_t, _, _ = eval_h(w)
            fm = None if h_t is None else h_t[lead]
            if fm is not None and abs(fm) < abs(best_f):
                best_t, best_f = tm, fm
            if fm is None or fm <= 0:
                t_hi, f_hi = tm, fm
                if last == 1 and f_lo > 0:
                    f_lo *= 0.5
                last = 1
            else:
                t_lo, f_lo = tm, fm
                if last == -1 and f_hi is not None and np.isfinite(f_hi):
                    f_hi *= 0.5
                last = -1
        return out(base[g] * np.exp(best_t)), best_f, at_floor

    def slave_refresh(vec, S):
        """Re-root wall-hugging ions worst-first; failed roots drop out."""
        out = vec.copy()
        demoted = set()
        floored = set()
        for _ in range(2):
            live = [j for j in S if j not in demoted]
            if not live:
                break
            h, _, _ = eval_h(out)
            if h is not None and all(
                abs(h[j]) <= 1e-7 or j in floored for j in live
            ):
                break
            order = sorted(
                live, key=lambda j: -(abs(h[j]) if h is not None else math.inf)
            )
            for j in order:
                if h is not None and abs(h[j]) <= 1e-7:
                    floored.discard(j)
                    continue
                r = scalar_root(out, j)
                if r is None:
                    demoted.add(j)
                else:
                    out[j] = r[0]
                    if r[2]:
                        floored.add(j)
                    else:
                        floored.discard(j)
        return out, demoted, floored

    def slaved_eval(vec, S, allow_demote=False):
        """Refresh slaved roots then evaluate.  A root failure at a trial
        point rejects the trial (bad -3); only base points may demote."""
        dem: set[int] = set()
        flr: set[int] = set()
        if S:
            v2, dem, flr = slave_refresh(vec, S)
            if dem and not allow_demote:
                return None, vec, -3, set(), flr, None
            S.difference_update(dem)
            vec = v2
        h, bad, ch = eval_h(vec)
        return h, vec, bad, dem, flr, ch

    def project_en(vec, S=frozenset(), h=None):
        """Rescale well-behaved ions onto the electroneutral manifold.

        Slaved ions and ions whose candidate has collapsed (h far negative)
        keep their coordinates; their charge enters as fixed background.
        """
        live = np.array(
            [j for j in idx if j not in S and (h is None or h[j] > -2.0)],
            dtype=int,
        )
        if live.size == 0:
            return vec
        zl = z[live]
        if np.all(zl >= 0.0) or np.all(zl <= 0.0):
            return vec
        keep = set(int(v) for v in live)
        chi_bg = float(sum(z[j] * vec[j] for j in idx if j not in keep))
        u, _, ok = donnan_root(zl, vec[live].copy(), chi_bg, 5.0, 1e-12)
        if not ok:
            return vec
        w = vec.copy()
        w[live] = vec[live] * np.exp(-zl * u)
        return w

    cp = cp0.copy()
    cp = project_en(cp)

    if da == 2 and z[idx[0]] != 0.0 and z[idx[1]] != 0.0:
        # joint scaling of a charged pair stays on the electroneutral
        # manifold, where both residuals coincide: the system is one ray
        r = scalar_root(cp, idx)
        if r is None:
            raise NumericalBreakdownError(
                f"no feasible permeate along the electroneutral ray at "
                f"J_v = {jv:.3e} m/s"
            )
        cp[idx] = r[0]
        h, _, _ = eval_h(cp)
        if h is None:
            raise NumericalBreakdownError(
                f"rooted permeate lost feasibility at J_v = {jv:.3e} m/s"
            )
        rel = float(np.max(np.abs(np.exp(h[idx]) - 1.0)))
        if rel <= config.tol_rel or r[2]:
            return cp, evals
        raise NonConvergenceError(
            f"electroneutral ray root left a residual of {rel:.3e} at "
            f"J_v = {jv:.3e} m/s",
            history={"rel_change": rel},
        )

    chain, bad = chain_eval(cp)
    for attempt in range(400):
        if chain is not None:
            break
        if attempt < 300 and bad >= 0:
            cp[bad] *= 0.5
        else:
            cp = 0.5 * cp
        chain, bad = chain_eval(cp)
    if chain is None:
        raise NumericalBreakdownError(
            f"no feasible starting permeate at J_v = {jv:.3e} m/s"
        )

    psi: np.ndarray | None = None
    psi_rel = math.inf
    eta_eff = config.eta_c
    prev_step: np.ndarray | None = None
    rel_prev = math.inf
    rel = math.inf

    def track_psi(phi: np.ndarray) -> None:
        nonlocal psi, psi_rel
        if psi is None:
            psi = phi.copy()
            psi_rel = math.inf
        else:
            psi_rel = float(
                np.max(np.abs(phi - psi)) / max(float(np.max(np.abs(phi))), 1e-3)
            )
            psi = update_potential(psi, phi, config.eta_psi)

    def sweep_block(n_sweeps: int) -> str:
        nonlocal cp, chain, eta_eff, prev_step, rel_prev, rel
        for _ in range(n_sweeps):
            w, cand = candidate(cp, chain)
            step_vec = np.where(active, cand - cp, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel_vec = np.where(
                    active, np.abs(step_vec) / np.maximum(cp, 1e-300), 0.0
                )
            rel = float(np.max(rel_vec)) if rel_vec.size else 0.0
            track_psi(chain.phi)
            if rel <= config.tol_rel and psi_rel <= config.tol_rel:
                cp = cand
                return "done"
            if (
                prev_step is not None
                and float(step_vec @ prev_step) < 0.0
                and rel > 0.9999 * rel_prev
            ):
                eta_eff = max(0.6 * eta_eff, 1e-3)
            prev_step = step_vec
            rel_prev = rel
            cp_next = np.where(
                active,
                update_concentration(np.where(active, cp, 1.0), cand, eta_eff),
                0.0,
            )
            nxt = None
            for attempt in range(120):
                if evals >= budget:
                    return "budget"
                nxt, bad = chain_eval(cp_next)
                if nxt is not None:
                    break
                if attempt < 60 and bad >= 0:
                    cp_next[bad] = 0.5 * (cp_next[bad] + cp[bad])
                else:
                    cp_next = 0.5 * (cp_next + cp)
            if nxt is None:
                raise NumericalBreakdownError(
                    f"pore march produced a negative or non-finite "
                    f"concentration at J_v = {jv:.3e} m/s"
                )
            cp = cp_next
            chain = nxt
            if evals >= budget:
                return "budget"
        return "more"

    def fail_budget() -> NonConvergenceError:
        return NonConvergenceError(
            f"transport iteration exhausted {config.max_iters} chain "
            f"evaluations at J_v = {jv:.3e} m/s",
            history={"rel_change": rel, "psi_rel_change": psi_rel},
        )

    outcome = sweep_block(200)
    if outcome == "done":
        return cp, evals
    if outcome == "budget":
        raise fail_budget()

    S: set[int] = set()
    cooldown: dict[int, int] = {}
    cp_ok = None
    eta2 = config.eta_c
    prev2 = None
    relb_prev = math.inf
    rounds = 0
    hn_best = math.inf
    stall = 0
    dlt = 1e-6
    while evals < budget:
        rounds += 1
        h, cp2, badb, dem, flr, ch = slaved_eval(cp, S, allow_demote=True)
        for j in dem:
            cooldown[j] = rounds + 5
        if h is None:
            if (
                badb >= 0
                and badb not in S
                and len(S) < da - 1
                and cooldown.get(badb, 0) <= rounds
            ):
                S.add(badb)
                continue
            repaired = False
            if cp_ok is not None:
                for _ in range(20):
                    cp = 0.5 * (cp + cp_ok)
                    h2, _, _ = eval_h(cp)
                    if h2 is not None:
                        repaired = True
                        break
            if repaired:
                continue
            if badb == -1:
                raise InfeasiblePartitioningError(
                    f"no Donnan equilibrium at the pore entrance at "
                    f"J_v = {jv:.3e} m/s"
                )
            if badb == -2:
                raise InfeasiblePartitioningError(
                    f"exit partitioning became infeasible at J_v = {jv:.3e} m/s"
                )
            raise NumericalBreakdownError(
                f"pore march produced a negative or non-finite concentration "
                f"at J_v = {jv:.3e} m/s"
            )
        cp = cp2
        cp_ok = cp.copy()
        track_psi(ch.phi)
        # ions parked at the representability floor are converged in x;
        # the gate and the descent metric run on the reducible residual
        rel = float(np.max(np.abs(np.exp(h[idx]) - 1.0)))
        meas = np.array([j for j in idx if j not in flr], dtype=int)
        rel_g = float(np.max(np.abs(np.exp(h[meas]) - 1.0))) if meas.size else 0.0
        hn = float(h[meas] @ h[meas])
        if rel_g <= config.tol_rel:
            while psi_rel > config.tol_rel and evals < budget:
                track_psi(ch.phi)
                evals += 1
            if psi_rel <= config.tol_rel:
                return cp, evals
            raise fail_budget()
        if hn < 0.98 * hn_best:
            hn_best = hn
            stall = 0
        else:
            stall += 1
            if stall >= 10 and float(np.min(h[idx])) < -2.0:
                stall = 0
                B_now = [
                    j for j in idx
                    if j not in S and cooldown.get(j, 0) <= rounds
                ]
                if B_now and len(S) < da - 1:
                    S.add(max(B_now, key=lambda j: abs(h[j])))
                    continue
        B = [j for j in idx if j not in S]
        fails: dict[int, int] = {}
        stepped = False
        if B:
            nb = len(B)
            J = np.zeros((nb, nb))
            jac_ok = True
            cand0 = cp[B] * np.exp(h[B])
            for a, j in enumerate(B):
                got = False
                for sgn in (1.0, -1.0):
                    if evals > budget:
                        break
                    w = cp.copy()
                    w[j] = cp[j] * math.exp(sgn * dlt)
                    h_p, w2, badp, demp, flp, chp = slaved_eval(w, S)
                    if h_p is None:
                        if badp >= 0:
                            fails[badp] = fails.get(badp, 0) + 1
                        continue
                    cand_p = w2[B] * np.exp(h_p[B])
                    J[:, a] = np.log(cand_p / cand0) / (sgn * dlt)
                    got = True
                    break
                if not got:
                    jac_ok = False
                    break
            if jac_ok:
                try:
                    s = np.linalg.solve(J - np.eye(nb), -h[B])
                except np.linalg.LinAlgError:
                    s = None
                if s is not None and np.all(np.isfinite(s)):
                    smax = float(np.max(np.abs(s)))
                    if smax > 3.0:
                        s = s * (3.0 / smax)
                    alpha = 1.0
                    for _ in range(12):
                        if evals > budget:
                            break
                        w = cp.copy()
                        w[B] = cp[B] * np.exp(alpha * s)
                        w = project_en(w, S, h)
                        h_t, w2, badt, demt, flt, cht = slaved_eval(w, S)
                        if h_t is not None:
                            m2 = np.array(
                                [j for j in idx if j not in flr and j not in flt],
                                dtype=int,
                            )
                            hnm = float(h[m2] @ h[m2])
                            hnt = float(h_t[m2] @ h_t[m2])
                            if (
                                hnt <= hnm * (1.0 - 1e-4 * alpha)
                                and hnm - hnt > 1e-12 * hnm
                            ):
                                cp = w2
                                stepped = True
                                break
                        elif badt >= 0:
                            fails[badt] = fails.get(badt, 0) + 1
                        alpha *= 0.5
        if stepped:
            continue
        if B and evals <= budget:
            cand_b = cp[B] * np.exp(h[B])
            step_vec = np.zeros(d)
            step_vec[B] = cand_b - cp[B]
            rel_b = float(np.max(np.abs(step_vec[B]) / cp[B]))
            if (
                prev2 is not None
                and float(step_vec @ prev2) < 0.0
                and rel_b > 0.9999 * relb_prev
            ):
                eta2 = max(0.6 * eta2, 1e-3)
            prev2 = step_vec
            relb_prev = rel_b
            f = np.minimum(
                1.0,
                np.abs(cp[B] / np.where(step_vec[B] == 0.0, 1.0, step_vec[B])),
            )
            w = cp.copy()
            w[B] = cp[B] * (1.0 + eta2 * f * step_vec[B] / cp[B])
            w = project_en(w, S, h)
            done_sweep = False
            for _ in range(60):
                if evals > budget:
                    break
                h_t, w2, badt, demt, flt, cht = slaved_eval(w, S)
                if h_t is not None:
                    cp = w2
                    done_sweep = True
                    break
                if badt >= 0:
                    fails[badt] = fails.get(badt, 0) + 1
                    if (
                        badt not in S
                        and fails[badt] >= 6
                        and len(S) < da - 1
                        and cooldown.get(badt, 0) <= rounds
                    ):
                        S.add(badt)
                        continue
                w[B] = 0.5 * (w[B] + cp[B])
            if not done_sweep and evals <= budget:
                if fails and len(S) < da - 1:
                    worst = max(fails, key=fails.get)
                    if cooldown.get(worst, 0) <= rounds:
                        S.add(worst)
                else:
                    raise NonConvergenceError(
                        f"transport iteration stalled at J_v = {jv:.3e} m/s",
                        history={"rel_change": rel, "psi_rel_change": psi_rel},
                    )
        elif not B:
            h_t, cp2b, badt, demt, flt, cht = slaved_eval(cp, S)
            if h_t is None:
                if badt == -1:
                    raise InfeasiblePartitioningError(
                        f"no Donnan equilibrium at the pore entrance at "
                        f"J_v = {jv:.3e} m/s"
                    )
                if badt == -2:
                    raise InfeasiblePartitioningError(
                        f"exit partitioning became infeasible at "
                        f"J_v = {jv:.3e} m/s"
                    )
                raise NumericalBreakdownError(
                    f"pore march produced a negative or non-finite "
                    f"concentration at J_v = {jv:.3e} m/s"
                )
            cp = cp2b
    raise fail_budget()


def _joint_solve(
    feed: MixtureState,
    jv: float,
    membrane: MembraneParams,
    config: SolverConfig,
    constants: PhysicalConstants,
    delta_f: float,
    permeate_guess: np.ndarray | None,
) -> tuple[np.ndarray, int, _PoreGeometry]:
    """Converged permeate vector for the film + pore chain at one flux."""
    if jv < 0:
        raise InvalidInputError(f"volume flux must be non-negative, got {jv}")
    d = feed.d
    z = feed.valences.astype(float)
    geo = _pore_geometry(feed, membrane, constants)
    active = geo.include & (np.asarray(feed.concentrations) > 0)

    if permeate_guess is not None:
        cp0 = np.asarray(permeate_guess, dtype=float).copy()
        if cp0.shape != (d,):
            raise InvalidInputError("permeate guess width does not match the feed")
        cp0 = np.where(active & (cp0 > 0), cp0, 0.0)
        missing = active & (cp0 == 0.0)
        cp0[missing] = (feed.concentrations * geo.a_tot)[missing]
    else:
        cp0 = np.where(active, feed.concentrations * geo.a_tot, 0.0)

    if not np.any(active):
        return np.zeros(d), 0, geo

    if config.activity.kind == "ideal":
        z_arr, kc_f, kdd_f = _film_arrays(feed)
        cp, iterations, rel, psi_rel, status = transport_fixed_point(
            np.asarray(feed.concentrations, dtype=float),
            z_arr,
            kc_f,
            kdd_f,
            geo.kc,
            geo.kdd,
            geo.a_tot,
            active,
            float(membrane.chi_d_mol_m3),
            cp0,
            float(jv),
            float(delta_f),
            membrane.dx_e_m,
            config.n_grid,
            config.eta_psi,
            config.eta_c,
            config.tol_rel,
            config.max_iters,
            _reduced_u_max(constants),
            DONNAN_RTOL,
        )
        if status == 1:
            raise NumericalBreakdownError(
                f"march produced a negative or non-finite concentration at "
                f"J_v = {jv:.3e} m/s (iteration {iterations})"
            )
        if status == 2:
            raise InfeasiblePartitioningError(
                f"no Donnan equilibrium at the pore entrance at J_v = {jv:.3e} m/s"
            )
        if status == 4:
            raise InfeasiblePartitioningError(
                f"exit partitioning became infeasible at J_v = {jv:.3e} m/s"
            )
        if status == 3:
            raise NonConvergenceError(
                f"transport iteration failed to converge at J_v = {jv:.3e} "
                f"m/s ({iterations} chain evaluations, residual {rel:.3e})",
                history={"rel_change": rel, "psi_rel_change": psi_rel},
            )
        return cp, int(iterations), geo
    cp, iterations = _joint_python(
        feed, cp0, active, jv, membrane, config, constants, geo, delta_f
    )
    return cp, iterations, geo


def _charge_residuals(
    profile: np.ndarray,
    cp: np.ndarray,
    z: np.ndarray,
    chi: float,
) -> tuple[float, float]:
    zc = profile @ z
    scale = profile @ np.abs(z) + abs(chi)
    pore = float(np.max(np.abs(zc + chi) / np.maximum(scale, 1e-300)))
    perm_scale = float(np.abs(z) @ cp)
    perm = abs(float(z @ cp)) / perm_scale if perm_scale > 0 else 0.0
    return pore, perm


def pore_solve(
    wall: MixtureState,
    jv: float,
    membrane: MembraneParams,
    config: SolverConfig,
    constants: PhysicalConstants = CONSTANTS,
    permeate_guess: np.ndarray | None = None,
) -> PoreResult:
    """Solve the hindered-transport problem inside the pore at a fixed wall state.

    Equivalent to the full chain with a zero-thickness film.  Ions whose
    radius ratio reaches 1 are fully excluded: they enter neither the
    partitioning closure nor the pore march and leave with zero permeate
    concentration (rejection 1).
    """
    cp, iterations, geo = _joint_solve(
        wall, jv, membrane, config, constants, 0.0, permeate_guess
    )
    z = wall.valences.astype(float)
    u_max = _reduced_u_max(constants)
    chain, _ = _chain_once(wall, cp, jv, membrane, config, constants, geo, 0.0)
    if chain is None:
        raise NumericalBreakdownError("final pore march broke down")
    active = geo.include & (chain.c_in > 0)
    if np.any(active):
        gamma_perm = (
            np.ones(wall.d)
            if config.activity.kind == "ideal"
            else activity_coefficients(
                wall.with_concentrations(cp, jv=jv), config.activity, constants
            )
        )
        w, cp_check = _exit_partition(z, chain.profile[-1], geo, gamma_perm, u_max)
        self_consistency = float(
            np.max(
                np.abs(cp_check - cp)
                / np.maximum(np.where(active, cp, 1.0), 1e-300)
            )
        )
    else:
        w = 0.0
        self_consistency = 0.0
    pore_charge, perm_charge = _charge_residuals(
        chain.profile, cp, z, membrane.chi_d_mol_m3
    )
    if pore_charge > config.tol_en or perm_charge > config.tol_en:
        raise NumericalBreakdownError(
            f"electroneutrality residual above tolerance: pore {pore_charge:.3e}, "
            f"permeate {perm_charge:.3e}"
        )
    rt_f = constants.R_gas * constants.T / constants.F
    return PoreResult(
        dpsi_in_V=chain.dpsi_in_V,
        dpsi_out_V=w * rt_f,
        c_in=chain.c_in,
        profile=chain.profile,
        phi=chain.phi,
        permeate_conc=cp,
        iterations=iterations,
        residuals={
            "self_consistency": self_consistency,
            "pore_charge": pore_charge,
            "permeate_charge": perm_charge,
        },
    )


def _rejections(reference: MixtureState, cp: np.ndarray) -> np.ndarray:
    out = np.zeros(reference.d)
    cf = reference.concentrations
    sel = reference.mask & (cf > 0)
    out[sel] = 1.0 - cp[sel] / cf[sel]
    return out


def _solve_single(
    feed: MixtureState,
    membrane: MembraneParams,
    config: SolverConfig,
    jv: float,
    constants: PhysicalConstants,
    warm_permeate: np.ndarray | None,
    delta_f: float,
) -> TransportSolution:
    cp, iterations, geo = _joint_solve(
        feed, jv, membrane, config, constants, delta_f, warm_permeate
    )
    z = feed.valences.astype(float)
    u_max = _reduced_u_max(constants)
    chain, _ = _chain_once(feed, cp, jv, membrane, config, constants, geo, delta_f)
    if chain is None:
        raise NumericalBreakdownError("final film/pore march broke down")
    active = geo.include & (chain.c_in > 0)
    if np.any(active):
        gamma_perm = (
            np.ones(feed.d)
            if config.activity.kind == "ideal"
            else activity_coefficients(
                feed.with_concentrations(cp, jv=jv), config.activity, constants
            )
        )
        w, cp_check = _exit_partition(z, chain.profile[-1], geo, gamma_perm, u_max)
        self_consistency = float(
            np.max(
                np.abs(cp_check - cp)
                / np.maximum(np.where(active, cp, 1.0), 1e-300)
            )
        )
    else:
        w = 0.0
        self_consistency = 0.0
    pore_charge, perm_charge = _charge_residuals(
        chain.profile, cp, z, membrane.chi_d_mol_m3
    )
    if pore_charge > config.tol_en or perm_charge > config.tol_en:
        raise NumericalBreakdownError(
            f"electroneutrality residual above tolerance: pore {pore_charge:.3e}, "
            f"permeate {perm_charge:.3e}"
        )

    # Film profile against the converged permeate, for reporting.
    zf, kc_f, kdd_f = _film_arrays(feed)
    film_profile, film_phi, bad = march_domain(
        np.asarray(feed.concentrations, dtype=float),
        cp, zf, kc_f, kdd_f, float(jv), float(delta_f), config.n_grid,
    )
    if bad >= 0:
        raise FilmDivergenceError("film march broke down on the converged state")

    rt_f = constants.R_gas * constants.T / constants.F
    n = config.n_grid
    permeate = feed.with_concentrations(cp, jv=jv)
    return TransportSolution(
        jv=jv,
        feed=feed,
        wall=chain.wall,
        permeate=permeate,
        x_m=np.linspace(0.0, membrane.dx_e_m, n + 1),
        pore_profiles=chain.profile,
        psi_V=chain.dpsi_in_V + chain.phi * rt_f,
        film_x_m=np.linspace(-delta_f, 0.0, n + 1),
        film_profiles=film_profile,
        film_psi_V=(film_phi - film_phi[-1]) * rt_f,
        dpsi_donnan_in_V=chain.dpsi_in_V,
        dpsi_donnan_out_V=w * rt_f,
        ion_fluxes=cp * jv,
        rejections=_rejections(feed, cp),
        intrinsic_rejections=_rejections(chain.wall, cp),
        iterations=iterations,
        converged=True,
        residuals={
            "self_consistency": self_consistency,
            "pore_charge": pore_charge,
            "permeate_charge": perm_charge,
        },
    )


def _equilibrium_point(
    feed: MixtureState,
    membrane: MembraneParams,
    config: SolverConfig,
    constants: PhysicalConstants,
) -> CurvePoint:
    """Exact zero-flux solution: the permeate equals the feed.

    At J_v = 0 every flux vanishes, the pore holds its Donnan-partitioned
    entrance composition uniformly, and the exit partition undoes the
    entrance one, so no iteration is needed.
    """
    gamma = activity_coefficients(feed, config.activity, constants)
    dpsi_in, c_in = solve_donnan(feed, gamma, membrane, constants)
    n = config.n_grid
    d = feed.d
    delta_f = film_thickness(config)
    solution = TransportSolution(
        jv=0.0,
        feed=feed,
        wall=feed,
        permeate=feed.with_concentrations(feed.concentrations, jv=0.0),
        x_m=np.linspace(0.0, membrane.dx_e_m, n + 1),
        pore_profiles=np.tile(c_in, (n + 1, 1)),
        psi_V=np.full(n + 1, dpsi_in),
        film_x_m=np.linspace(-delta_f, 0.0, n + 1),
        film_profiles=np.tile(np.asarray(feed.concentrations), (n + 1, 1)),
        film_psi_V=np.zeros(n + 1),
        dpsi_donnan_in_V=dpsi_in,
        dpsi_donnan_out_V=-dpsi_in,
        ion_fluxes=np.zeros(d),
        rejections=np.zeros(d),
        intrinsic_rejections=np.zeros(d),
        iterations=0,
        converged=True,
        residuals={
            "self_consistency": 0.0, "pore_charge": 0.0, "permeate_charge": 0.0,
        },
    )
    return CurvePoint(
        jv=0.0, rejections=solution.rejections, permeate=solution.permeate,
        solution=solution,
    )


def solve_rejection(
    feed: MixtureState,
    membrane: MembraneParams,
    config: SolverConfig | None = None,
    flux_grid: Sequence[float] | np.ndarray | None = None,
    constants: PhysicalConstants = CONSTANTS,
    on_error: str = "raise",
) -> RejectionCurve:
    """Rejection curve over a volume-flux grid, warm-starting point to point.

    The grid is solved in ascending order so each converged permeate seeds
    the next point.  ``on_error="skip"`` records failed points (flux, reason)
    instead of raising; ``"raise"`` re-raises on the first failure.
    """
    if on_error not in ("raise", "skip"):
        raise InvalidInputError(
            f"on_error must be 'raise' or 'skip', got {on_error!r}"
        )
    if config is None:
        config = SolverConfig()
    feed = validate_feed(feed)
    grid = (
        default_flux_grid()
        if flux_grid is None
        else np.asarray(flux_grid, dtype=float)
    )
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidInputError("flux grid must be a non-empty 1-D sequence")
    if np.any(~np.isfinite(grid)) or np.any(grid < 0):
        raise InvalidInputError("flux grid entries must be finite and non-negative")
    grid = np.sort(grid)
    if np.any(np.diff(grid) == 0):
        raise InvalidInputError("flux grid entries must be distinct")

    delta_f = film_thickness(config)
    points: list[CurvePoint] = []
    failures: list[tuple[float, str]] = []
    warm = None
    for jv in grid:
        if jv == 0.0:
            points.append(_equilibrium_point(feed, membrane, config, constants))
            continue
        try:
            sol = _solve_single(
                feed, membrane, config, float(jv), constants, warm, delta_f
            )
        except IonfluxError as exc:
            # warm starts are an optimization; a failed one can sit in a
            # worse basin than the deterministic cold init, so retry cold
            if warm is not None:
                try:
                    sol = _solve_single(
                        feed, membrane, config, float(jv), constants, None,
                        delta_f,
                    )
                except IonfluxError as exc2:
                    if on_error == "skip":
                        failures.append((float(jv), str(exc2)))
                        continue
                    raise
            elif on_error == "skip":
                failures.append((float(jv), str(exc)))
                continue
            else:
                raise
        warm = np.asarray(sol.permeate.concentrations, dtype=float)
        points.append(
            CurvePoint(
                jv=float(jv), rejections=sol.rejections,
                permeate=sol.permeate, solution=sol,
            )
        )
    return RejectionCurve(
        feed=feed, membrane=membrane, points=tuple(points), failures=tuple(failures)
    )
