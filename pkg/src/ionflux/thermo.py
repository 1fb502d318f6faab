"""Solution thermodynamics and pore partitioning.

Activity coefficient models (ideal, Davies, and a binary-interaction
Pitzer-Kim model), hydrodynamic hindrance factors, and the three partition
mechanisms at a pore mouth: steric sieving, Born dielectric exclusion, and
the Donnan potential jump.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .chem import IonSpecies, MembraneParams, MixtureState
from .constants import CONSTANTS, PhysicalConstants
from ._kernels import donnan_root
from .errors import (
    IncompleteModelError,
    InfeasiblePartitioningError,
    InvalidInputError,
    IonExceedsPoreError,
)

# Debye-Huckel osmotic slope at 298.15 K, (kg/mol)^0.5.
A_PHI = 0.3915
# Corresponding base-10 single-ion slope for the Davies equation.
A_DAVIES = 3.0 * A_PHI / math.log(10.0)
# Pitzer ionic-strength damping constant, (kg/mol)^0.5.
PITZER_B = 1.2
# Mass of solvent water per unit solution volume in dilute solutions, kg/m^3;
# converts mol/m^3 to molality.
WATER_KG_PER_M3 = 997.05


@dataclass(frozen=True)
class PitzerPair:
    """Binary interaction parameters for one cation-anion pair at 25 C."""

    beta0: float
    beta1: float
    cphi: float
    beta2: float = 0.0
    alpha1: float = 2.0
    alpha2: float = 12.0


@dataclass(frozen=True)
class ActivityModel:
    """Activity coefficient model selector.

    kind is one of "ideal", "davies", "pitzer_kim".  The Pitzer variant
    needs binary parameters for every cation-anion pair that carries mass;
    a missing pair raises IncompleteModelError at evaluation time.
    """

    kind: str = "ideal"
    pitzer_pairs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("ideal", "davies", "pitzer_kim"):
            raise InvalidInputError(f"unknown activity model kind {self.kind!r}")


IDEAL = ActivityModel("ideal")


def load_pitzer_pairs(path=None) -> dict:
    """Load cation|anion -> PitzerPair from JSON (bundled table by default)."""
    if path is None:
        text = resources.files("ionflux").joinpath("data/pitzer.json").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    pairs = {}
    for key, val in raw.items():
        cation, _, anion = key.partition("|")
        if not cation or not anion:
            raise InvalidInputError(f"bad pair key {key!r}, expected 'CATION|ANION'")
        alpha1 = val.get("alpha1", 1.4 if "beta2" in val else 2.0)
        pairs[(cation, anion)] = PitzerPair(
            beta0=float(val["beta0"]),
            beta1=float(val["beta1"]),
            cphi=float(val["cphi"]),
            beta2=float(val.get("beta2", 0.0)),
            alpha1=float(alpha1),
            alpha2=float(val.get("alpha2", 12.0)),
        )
    return pairs


def pitzer_model(path=None) -> ActivityModel:
    return ActivityModel("pitzer_kim", load_pitzer_pairs(path))


def _pitzer_g(x: float) -> float:
    if x == 0.0:
        return 1.0
    return 2.0 * (1.0 - (1.0 + x) * math.exp(-x)) / (x * x)


def _pitzer_gp(x: float) -> float:
    # d(B)/dI helper: -2 (1 - (1 + x + x^2/2) e^-x) / x^2, scaled by 1/I later.
    if x == 0.0:
        return 0.0
    return -2.0 * (1.0 - (1.0 + x + 0.5 * x * x) * math.exp(-x)) / (x * x)


def activity_coefficients(
    state: MixtureState,
    model: ActivityModel = IDEAL,
    constants: PhysicalConstants = CONSTANTS,
) -> np.ndarray:
    """Molal activity coefficients for every slot of the mixture.

    Masked-out slots get gamma = 1.  Concentrations are converted to
    molality with a fixed dilute-solution water density; the Debye-Huckel
    slope is the 25 C value regardless of the configured temperature.
    """
    d = state.d
    gamma = np.ones(d)
    if model.kind == "ideal":
        return gamma

    live = state.mask & (state.concentrations > 0.0)
    molal = np.where(live, state.concentrations / WATER_KG_PER_M3, 0.0)
    z = state.valences.astype(float)
    ionic = 0.5 * float(np.sum(molal * z * z))
    if ionic <= 0.0:
        return gamma
    sqrt_i = math.sqrt(ionic)

    if model.kind == "davies":
        h = sqrt_i / (1.0 + sqrt_i) - 0.3 * ionic
        for j in range(d):
            if live[j]:
                gamma[j] = 10.0 ** (-A_DAVIES * z[j] * z[j] * h)
        return gamma

    cations = [j for j in range(d) if live[j] and z[j] > 0]
    anions = [j for j in range(d) if live[j] and z[j] < 0]

    def pair_params(jc, ja) -> PitzerPair:
        key = (state.species[jc].name, state.species[ja].name)
        try:
            return model.pitzer_pairs[key]
        except KeyError:
            raise IncompleteModelError(
                f"no Pitzer parameters for pair {key[0]}|{key[1]}"
            ) from None

    # Long-range term shared by all ions, plus the ionic-strength derivative
    # of the second virial coefficients.
    f_term = -A_PHI * (
        sqrt_i / (1.0 + PITZER_B * sqrt_i)
        + (2.0 / PITZER_B) * math.log(1.0 + PITZER_B * sqrt_i)
    )
    b_val = {}
    c_val = {}
    for jc in cations:
        for ja in anions:
            p = pair_params(jc, ja)
            x1 = p.alpha1 * sqrt_i
            x2 = p.alpha2 * sqrt_i
            b_val[(jc, ja)] = p.beta0 + p.beta1 * _pitzer_g(x1) + p.beta2 * _pitzer_g(x2)
            bp = (p.beta1 * _pitzer_gp(x1) + p.beta2 * _pitzer_gp(x2)) / ionic
            c_val[(jc, ja)] = p.cphi / (2.0 * math.sqrt(abs(z[jc] * z[ja])))
            f_term += molal[jc] * molal[ja] * bp

    z_tot = float(np.sum(molal * np.abs(z)))
    triple = 0.0
    for jc in cations:
        for ja in anions:
            triple += molal[jc] * molal[ja] * c_val[(jc, ja)]

    for j in range(d):
        if not live[j]:
            continue
        ln_g = z[j] * z[j] * f_term + abs(z[j]) * triple
        if z[j] > 0:
            for ja in anions:
                ln_g += molal[ja] * (
                    2.0 * b_val[(j, ja)] + z_tot * c_val[(j, ja)]
                )
        else:
            for jc in cations:
                ln_g += molal[jc] * (
                    2.0 * b_val[(jc, j)] + z_tot * c_val[(jc, j)]
                )
        gamma[j] = math.exp(ln_g)
    return gamma


def mean_activity_coefficient(
    state: MixtureState, cation: str, anion: str, model: ActivityModel
) -> float:
    """Stoichiometric mean gamma for one salt in the mixture."""
    gamma = activity_coefficients(state, model)
    jc = state.index_of(cation)
    ja = state.index_of(anion)
    nu_c = abs(state.species[ja].z)
    nu_a = abs(state.species[jc].z)
    return float(
        (gamma[jc] ** nu_c * gamma[ja] ** nu_a) ** (1.0 / (nu_c + nu_a))
    )


def hindrance_coefficients(lam: float) -> tuple[float, float]:
    """Diffusive and convective hindrance factors (K_d, K_c) for lambda < 1.

    lambda is the solute-to-pore radius ratio; at lambda >= 1 the solute does
    not fit and the pore transport problem is undefined for it.
    """
    if lam < 0.0 or not math.isfinite(lam):
        raise InvalidInputError(f"radius ratio must be finite and >= 0, got {lam}")
    if lam >= 1.0:
        raise IonExceedsPoreError(f"solute radius ratio {lam:.4f} >= 1")
    kd = 1.0 - 2.30 * lam + 1.154 * lam * lam + 0.224 * lam ** 3
    kd = max(kd, 0.0)
    phi = (1.0 - lam) ** 2
    kc = (2.0 - phi) * (1.0 + 0.054 * lam - 0.988 * lam * lam + 0.441 * lam ** 3)
    return kd, kc


def steric_partition(lam: float) -> float:
    """Equilibrium steric factor (1 - lambda)^2, zero at or beyond lambda = 1."""
    if lam < 0.0 or not math.isfinite(lam):
        raise InvalidInputError(f"radius ratio must be finite and >= 0, got {lam}")
    if lam >= 1.0:
        return 0.0
    return (1.0 - lam) ** 2


def born_energy_j(
    z: int,
    cavity_radius_m: float,
    zeta_pore: float,
    zeta_bulk: float,
    constants: PhysicalConstants = CONSTANTS,
) -> float:
    """Born solvation energy barrier for moving one ion into the pore [J]."""
    if cavity_radius_m <= 0.0:
        raise InvalidInputError("cavity radius must be positive")
    return (
        (z * constants.e) ** 2
        / (8.0 * math.pi * constants.eps0 * cavity_radius_m)
        * (1.0 / zeta_pore - 1.0 / zeta_bulk)
    )


def dielectric_partition(
    ion: IonSpecies,
    membrane: MembraneParams,
    constants: PhysicalConstants = CONSTANTS,
) -> float:
    """Born exclusion factor exp(-dW / kT); equals 1 for an uncharged solute."""
    if ion.z == 0:
        return 1.0
    dw = born_energy_j(
        ion.z, ion.cavity_radius_m, membrane.zeta_p, membrane.zeta_b, constants
    )
    return math.exp(-dw / (constants.k_B * constants.T))


def donnan_factor(
    z: int, dpsi_V: float, constants: PhysicalConstants = CONSTANTS
) -> float:
    """Electrostatic partition factor exp(-z F dpsi / RT)."""
    return math.exp(-z * constants.F * dpsi_V / (constants.R_gas * constants.T))


@dataclass(frozen=True)
class PartitionFactors:
    """Per-ion partition factors at one membrane interface."""

    lam: float
    phi_steric: float
    phi_dielectric: float
    phi_donnan: float

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise InvalidInputError(f"lambda out of [0, 1): {self.lam}")
        for name in ("phi_steric", "phi_dielectric", "phi_donnan"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0.0):
                raise InvalidInputError(f"{name} must be finite and positive, got {v}")
        if self.phi_steric > 1.0:
            raise InvalidInputError("steric factor cannot exceed 1")

    @property
    def total(self) -> float:
        return self.phi_steric * self.phi_dielectric * self.phi_donnan


def partition_factors(
    ion: IonSpecies,
    membrane: MembraneParams,
    dpsi_V: float,
    constants: PhysicalConstants = CONSTANTS,
) -> PartitionFactors:
    lam = ion.stokes_radius_m / membrane.r_p_m
    if lam >= 1.0:
        raise IonExceedsPoreError(f"{ion.name}: radius ratio {lam:.4f} >= 1")
    return PartitionFactors(
        lam=lam,
        phi_steric=steric_partition(lam),
        phi_dielectric=dielectric_partition(ion, membrane, constants),
        phi_donnan=donnan_factor(ion.z, dpsi_V, constants),
    )


# Search window for the reduced Donnan potential u = F dpsi / RT.  0.5 V is
# far beyond any physical interfacial jump at NF conditions.
DONNAN_DPSI_MAX_V = 0.5
DONNAN_RTOL = 1e-10


def solve_donnan(
    wall_state: MixtureState,
    gamma_out: np.ndarray,
    membrane: MembraneParams,
    constants: PhysicalConstants = CONSTANTS,
    gamma_in: np.ndarray | None = None,
    chi_d: float | None = None,
) -> tuple[float, np.ndarray]:
    """Interfacial equilibrium at the feed-side pore mouth.

    Given the wall composition and its activity coefficients, finds the
    Donnan potential jump dpsi [V] such that the partitioned pore-entrance
    concentrations screen the fixed charge:

        C_in_j = C_wall_j (gamma_out_j / gamma_in_j) phi_S_j phi_Di_j
                 * exp(-z_j F dpsi / RT),
        sum_j z_j C_in_j + chi_d = 0.

    Solutes with lambda >= 1 are fully excluded (C_in = 0).  gamma_in
    defaults to 1 (ideal pore interior).  Returns (dpsi, C_in).
    """
    d = wall_state.d
    gamma_out = np.asarray(gamma_out, dtype=float)
    if gamma_out.shape != (d,):
        raise InvalidInputError("gamma_out must have one entry per slot")
    if gamma_in is None:
        gamma_in = np.ones(d)
    chi = membrane.chi_d_mol_m3 if chi_d is None else chi_d

    amp = np.zeros(d)
    z = wall_state.valences.astype(float)
    for j in range(d):
        if not wall_state.mask[j]:
            continue
        lam = wall_state.species[j].stokes_radius_m / membrane.r_p_m
        if lam >= 1.0:
            continue
        amp[j] = (
            wall_state.concentrations[j]
            * (gamma_out[j] / gamma_in[j])
            * steric_partition(lam)
            * dielectric_partition(wall_state.species[j], membrane, constants)
        )

    u_max = constants.F * DONNAN_DPSI_MAX_V / (constants.R_gas * constants.T)
    u, residual, ok = donnan_root(z, amp, float(chi), u_max, DONNAN_RTOL)
    if not ok:
        raise InfeasiblePartitioningError(
            f"no Donnan equilibrium within +/-{DONNAN_DPSI_MAX_V} V "
            f"(residual {residual:.3e}, chi_d {chi:.3f} mol/m^3)"
        )
    c_in = amp * np.exp(-z * u)
    dpsi = u * constants.R_gas * constants.T / constants.F
    return dpsi, c_in
