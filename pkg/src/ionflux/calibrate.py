"""Membrane parameter regression from multi-ion rejection measurements.

The four latent descriptors (pore radius, active-layer thickness, pore
dielectric constant, fixed charge density) are fitted by weighted least
squares in rejection space: each record's residual is divided by its
measurement spread propagated to rejection units.  The search is a hybrid:
a simulated-annealing chain with geometric cooling explores the bounded box
globally, and every time it improves the incumbent a bounded Nelder-Mead
simplex polishes the new best point.  Both stages share one evaluation
budget and one seeded generator, so a fit is a pure function of
(dataset, bounds, seed, budget).

Solver failures during the search are charged a large finite penalty per
affected record instead of aborting, letting the chain walk out of regions
where the transport problem has no solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chem import MembraneParams, MixtureState, builtin_ion_database, make_mixture
from .enp import SolverConfig, solve_rejection
from .errors import (
    CalibrationFailureError,
    InvalidInputError,
)

__all__ = [
    "RejectionRecord",
    "ParamBounds",
    "DEFAULT_BOUNDS",
    "FitConfig",
    "FitResult",
    "objective",
    "fit_membrane",
]

PENALTY = 1e6


@dataclass(frozen=True)
class RejectionRecord:
    """One measured permeate concentration at one flux for one ion."""

    experiment_id: str
    ion: str
    z: int
    feed_mol_m3: float
    jv_m_s: float
    permeate_mol_m3: float
    sigma_mol_m3: float

    def __post_init__(self):
        if not self.feed_mol_m3 > 0:
            raise InvalidInputError(
                f"record {self.experiment_id}/{self.ion}: feed concentration "
                "must be positive"
            )
        if self.permeate_mol_m3 < 0:
            raise InvalidInputError(
                f"record {self.experiment_id}/{self.ion}: negative permeate "
                "concentration"
            )
        if self.sigma_mol_m3 < 0:
            raise InvalidInputError(
                f"record {self.experiment_id}/{self.ion}: negative sigma"
            )
        if not self.jv_m_s >= 0:
            raise InvalidInputError(
                f"record {self.experiment_id}/{self.ion}: negative flux"
            )


@dataclass(frozen=True)
class ParamBounds:
    """Box constraints for the fit, in the membrane's native units."""

    r_p_nm: tuple = (0.2, 2.0)
    dx_e_um: tuple = (0.1, 10.0)
    zeta_p: tuple = (10.0, 78.54)
    chi_d_mol_m3: tuple = (-500.0, 500.0)

    def __post_init__(self):
        for name in ("r_p_nm", "dx_e_um", "zeta_p", "chi_d_mol_m3"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise InvalidInputError(f"bounds for {name} must be finite with lo < hi")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.r_p_nm[0], self.dx_e_um[0],
                         self.zeta_p[0], self.chi_d_mol_m3[0]])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.r_p_nm[1], self.dx_e_um[1],
                         self.zeta_p[1], self.chi_d_mol_m3[1]])


DEFAULT_BOUNDS = ParamBounds()


@dataclass(frozen=True)
class FitConfig:
    """Search hyperparameters; the defaults are conventional, not tuned.

    ``t0=None`` anchors the initial temperature at the first objective value.
    ``sigma_space`` selects where residuals are weighted: ``"rejection"``
    divides rejection residuals by sigma/C_feed, ``"concentration"`` divides
    permeate residuals by sigma directly.
    """

    alpha: float = 0.95
    t0: float | None = None
    proposal_frac: float = 0.05
    nm_reflect: float = 1.0
    nm_expand: float = 2.0
    nm_contract: float = 0.5
    nm_shrink: float = 0.5
    nm_max_evals: int = 150
    sigma_space: str = "rejection"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InvalidInputError("cooling factor must lie in (0, 1)")
        if self.sigma_space not in ("rejection", "concentration"):
            raise InvalidInputError(
                "sigma_space must be 'rejection' or 'concentration'"
            )


@dataclass(frozen=True)
class FitResult:
    membrane: MembraneParams
    objective: float
    evaluations: int
    trace: tuple

    def to_dict(self) -> dict:
        return {
            "membrane": self.membrane.to_dict(),
            "objective": self.objective,
            "evaluations": self.evaluations,
            "trace": list(self.trace),
        }


@dataclass(frozen=True)
class _Experiment:
    feed: MixtureState
    fluxes: np.ndarray
    # per record: (flux index, ion slot, R_exp, sigma_R, mu, sigma_C)
    rows: tuple


def _group_experiments(dataset):
    """Group records into per-experiment feeds and precomputed residual rows."""
    if not dataset:
        raise InvalidInputError("dataset is empty")
    db = builtin_ion_database()
    by_exp: dict = {}
    for rec in dataset:
        by_exp.setdefault(rec.experiment_id, []).append(rec)

    positive = [r.sigma_mol_m3 for r in dataset if r.sigma_mol_m3 > 0]
    sigma_fill = min(positive) if positive else None

    experiments = []
    for exp_id in sorted(by_exp):
        recs = by_exp[exp_id]
        ions = []
        feed_by_ion = {}
        for r in recs:
            if r.ion not in feed_by_ion:
                ions.append(r.ion)
                feed_by_ion[r.ion] = (r.feed_mol_m3, r.z)
            elif feed_by_ion[r.ion] != (r.feed_mol_m3, r.z):
                raise InvalidInputError(
                    f"experiment {exp_id}: ion {r.ion} appears with inconsistent "
                    "feed concentration or valence"
                )
            if r.ion not in db:
                raise InvalidInputError(f"unknown ion {r.ion!r}")
            if db[r.ion].z != r.z:
                raise InvalidInputError(
                    f"ion {r.ion} has valence {db[r.ion].z}, record says {r.z}"
                )
        feed = make_mixture([db[i] for i in ions],
                            [feed_by_ion[i][0] for i in ions])
        slot = {ion: k for k, ion in enumerate(ions)}
        fluxes = np.array(sorted({r.jv_m_s for r in recs}))
        flux_index = {jv: k for k, jv in enumerate(fluxes)}
        rows = []
        for r in recs:
            sig = r.sigma_mol_m3 if r.sigma_mol_m3 > 0 else sigma_fill
            if sig is None:
                # whole dataset is noiseless: unit weights
                sigma_r = 1.0
                sigma_c = 1.0
            else:
                sigma_r = sig / r.feed_mol_m3
                sigma_c = sig
            r_exp = 1.0 - r.permeate_mol_m3 / r.feed_mol_m3
            rows.append((flux_index[r.jv_m_s], slot[r.ion], r_exp, sigma_r,
                         r.permeate_mol_m3, sigma_c))
        experiments.append(_Experiment(feed=feed, fluxes=fluxes, rows=tuple(rows)))
    return experiments


def _objective_value(membrane, experiments, solver_config, sigma_space):
    """Weighted SSE plus per-record penalties; returns (value, solved points)."""
    total = 0.0
    n_ok = 0
    for exp in experiments:
        curve = solve_rejection(
            exp.feed, membrane, solver_config, flux_grid=exp.fluxes,
            on_error="skip",
        )
        by_flux = {}
        for pt in curve.points:
            # match by nearest grid entry; the grid is the solver's input
            k = int(np.argmin(np.abs(exp.fluxes - pt.jv)))
            by_flux[k] = pt
        n_ok += len(curve.points)
        for kf, slot, r_exp, sigma_r, mu, sigma_c in exp.rows:
            pt = by_flux.get(kf)
            if pt is None:
                total += PENALTY
                continue
            if sigma_space == "rejection":
                resid = (float(pt.rejections[slot]) - r_exp) / sigma_r
            else:
                resid = (float(pt.permeate.concentrations[slot]) - mu) / sigma_c
            total += resid * resid
    return total, n_ok


def objective(membrane: MembraneParams, dataset, config: FitConfig | None = None,
              solver_config: SolverConfig | None = None) -> float:
    """Sum over records of squared rejection residuals over propagated sigma.

    Records whose flux point the transport solver cannot converge contribute
    a penalty of 1e6 each instead of raising.
    """
    config = config or FitConfig()
    solver_config = solver_config or SolverConfig()
    experiments = _group_experiments(dataset)
    value, _ = _objective_value(membrane, experiments, solver_config,
                                config.sigma_space)
    return value


def _reflect_unit(u: np.ndarray) -> np.ndarray:
    """Fold a point back into [0, 1]^n by reflection at the walls."""
    u = np.mod(u, 2.0)
    return np.where(u > 1.0, 2.0 - u, u)


def _to_membrane(u, lo, hi) -> MembraneParams:
    x = lo + u * (hi - lo)
    return MembraneParams(r_p_nm=float(x[0]), dx_e_um=float(x[1]),
                          zeta_p=float(x[2]), chi_d_mol_m3=float(x[3]))


class _Budget:
    """Shared evaluation counter with best-so-far trace."""

    def __init__(self, experiments, solver_config, sigma_space, budget):
        self.experiments = experiments
        self.solver_config = solver_config
        self.sigma_space = sigma_space
        self.budget = budget
        self.evals = 0
        self.any_ok = False
        self.best_f = math.inf
        self.best_u = None
        self.trace = []

    @property
    def exhausted(self) -> bool:
        return self.evals >= self.budget

    def __call__(self, u, lo, hi) -> float:
        membrane = _to_membrane(u, lo, hi)
        value, n_ok = _objective_value(
            membrane, self.experiments, self.solver_config, self.sigma_space
        )
        self.evals += 1
        if n_ok > 0:
            self.any_ok = True
        if value < self.best_f:
            self.best_f = value
            self.best_u = np.array(u, copy=True)
        self.trace.append(self.best_f)
        return value


def _nelder_mead(fn, u0, f0, lo, hi, config: FitConfig):
    """Bounded simplex descent from u0; spends from the shared budget."""
    n = u0.size
    pts = [np.array(u0, copy=True)]
    fs = [f0]
    for i in range(n):
        v = np.array(u0, copy=True)
        v[i] = v[i] + 0.05 if v[i] + 0.05 <= 1.0 else v[i] - 0.05
        if fn.exhausted:
            return
        pts.append(v)
        fs.append(fn(v, lo, hi))
    used = n
    while used < config.nm_max_evals and not fn.exhausted:
        order = np.argsort(fs, kind="stable")
        pts = [pts[i] for i in order]
        fs = [fs[i] for i in order]
        spread = max(np.max(np.abs(p - pts[0])) for p in pts[1:])
        if spread < 1e-7 or fs[-1] - fs[0] <= 1e-12 * (1.0 + abs(fs[0])):
            return
        centroid = np.mean(pts[:-1], axis=0)
        xr = _reflect_unit(centroid + config.nm_reflect * (centroid - pts[-1]))
        fr = fn(xr, lo, hi)
        used += 1
        if fr < fs[0]:
            if used >= config.nm_max_evals or fn.exhausted:
                return
            xe = _reflect_unit(centroid + config.nm_expand * (centroid - pts[-1]))
            fe = fn(xe, lo, hi)
            used += 1
            if fe < fr:
                pts[-1], fs[-1] = xe, fe
            else:
                pts[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            pts[-1], fs[-1] = xr, fr
            continue
        if used >= config.nm_max_evals or fn.exhausted:
            return
        xc = _reflect_unit(centroid + config.nm_contract * (pts[-1] - centroid))
        fc = fn(xc, lo, hi)
        used += 1
        if fc < fs[-1]:
            pts[-1], fs[-1] = xc, fc
            continue
        for i in range(1, n + 1):
            if used >= config.nm_max_evals or fn.exhausted:
                return
            pts[i] = _reflect_unit(pts[0] + config.nm_shrink * (pts[i] - pts[0]))
            fs[i] = fn(pts[i], lo, hi)
            used += 1


def fit_membrane(dataset, bounds: ParamBounds | None = None, seed: int = 0,
                 budget: int = 2000, config: FitConfig | None = None,
                 solver_config: SolverConfig | None = None) -> FitResult:
    """Hybrid global/local fit of the four membrane descriptors.

    Deterministic in (dataset, bounds, seed, budget, config): one seeded
    generator drives the starting point and all proposals.  Raises
    :class:`CalibrationFailureError` if the budget ends without a single
    converged solver point (the data and bounds are mutually infeasible).
    """
    bounds = bounds or DEFAULT_BOUNDS
    config = config or FitConfig()
    solver_config = solver_config or SolverConfig()
    if budget < 1:
        raise InvalidInputError("budget must be at least 1")
    experiments = _group_experiments(dataset)
    lo, hi = bounds.lo, bounds.hi

    rng = np.random.default_rng(seed)
    fn = _Budget(experiments, solver_config, config.sigma_space, budget)

    u = rng.uniform(0.0, 1.0, size=4)
    f_u = fn(u, lo, hi)
    t0 = config.t0 if config.t0 is not None else max(abs(f_u), 1.0)
    _nelder_mead(fn, u, f_u, lo, hi, config)

    k = 0
    while not fn.exhausted:
        temp = t0 * config.alpha ** k
        k += 1
        prev_best = fn.best_f
        v = _reflect_unit(u + rng.normal(0.0, config.proposal_frac, size=4))
        f_v = fn(v, lo, hi)
        if f_v <= f_u or rng.random() < math.exp(-(f_v - f_u) / max(temp, 1e-300)):
            u, f_u = v, f_v
        if fn.best_f < prev_best and not fn.exhausted:
            _nelder_mead(fn, fn.best_u, fn.best_f, lo, hi, config)

    if not fn.any_ok:
        raise CalibrationFailureError(
            f"no solver evaluation succeeded within the budget of {budget}"
        )
    return FitResult(
        membrane=_to_membrane(fn.best_u, lo, hi),
        objective=fn.best_f,
        evaluations=fn.evals,
        trace=tuple(fn.trace),
    )
