"""Core chemistry types, the species-mask convention, and the electroneutrality projection.

Concentrations are mol/m^3 throughout, radii are nm in the record types
(converted to SI where formulas need them), and fluxes are m/s.

A mixture is represented as a fixed-width vector of length ``d`` (the run
configuration's maximum species count) together with a binary mask selecting
which slots are live.  Masked-out slots must hold exactly zero so they can
never leak charge or mass into any computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateProjectionError, InvalidFeedError, InvalidInputError

__all__ = [
    "IonSpecies",
    "MixtureState",
    "MembraneParams",
    "DEFAULT_MEMBRANE",
    "project_electroneutral",
    "charge_imbalance",
    "validate_feed",
    "load_ion_database",
    "builtin_ion_database",
    "make_mixture",
]

# Relative charge-imbalance tolerance for a feed to count as neutral.
EPS_ELECTRONEUTRAL = 1e-6
# Relative imbalance above which a feed is rejected instead of repaired.
REPAIR_THRESHOLD = 1e-2


@dataclass(frozen=True)
class IonSpecies:
    """Immutable chemistry record for one ionic species.

    Attributes
    ----------
    name : unique text identifier within an ion database (e.g. ``"Na+"``).
    z : integer valence; 0 marks an uncharged tracer.
    stokes_radius_nm : Stokes radius [nm], used for steric/hindrance factors.
    cavity_radius_nm : Born cavity radius [nm], used for dielectric exclusion.
    diffusivity_m2_s : bulk diffusivity at infinite dilution [m^2/s].
    """

    name: str
    z: int
    stokes_radius_nm: float
    cavity_radius_nm: float
    diffusivity_m2_s: float

    def __post_init__(self):
        for attr in ("stokes_radius_nm", "cavity_radius_nm", "diffusivity_m2_s"):
            if not getattr(self, attr) > 0:
                raise InvalidInputError(f"ion {self.name!r}: {attr} must be positive")

    @property
    def stokes_radius_m(self) -> float:
        return self.stokes_radius_nm * 1e-9

    @property
    def cavity_radius_m(self) -> float:
        return self.cavity_radius_nm * 1e-9


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MixtureState:
    """A d-wide concentration vector with its species mask and flux coordinate.

    Invariants enforced at construction: non-negative concentrations, zero
    concentration wherever the mask is off, and consistent vector lengths.
    Instances are immutable (the arrays are marked read-only) and safe to
    share across threads.
    """

    concentrations: np.ndarray            # [mol/m^3], length d
    mask: np.ndarray                      # bool, length d
    species: tuple[IonSpecies, ...]       # length d
    jv: float = 0.0                       # flux coordinate [m/s]

    def __post_init__(self):
        conc = _frozen_array(self.concentrations)
        mask = _frozen_array(self.mask, dtype=bool)
        object.__setattr__(self, "concentrations", conc)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "species", tuple(self.species))
        d = len(self.species)
        if conc.shape != (d,) or mask.shape != (d,):
            raise InvalidInputError(
                f"length mismatch: {conc.shape[0]} concentrations, "
                f"{mask.shape[0]} mask entries, {d} species"
            )
        names = [s.name for s in self.species]
        if len(set(names)) != d:
            raise InvalidInputError(f"duplicate species names: {names}")
        if np.any(conc < 0):
            raise InvalidFeedError(f"negative concentration in {conc.tolist()}")
        if np.any(conc[~mask] != 0.0):
            raise InvalidInputError("masked-out species must have zero concentration")

    @property
    def d(self) -> int:
        return len(self.species)

    @property
    def valences(self) -> np.ndarray:
        return _frozen_array([s.z for s in self.species])

    @property
    def diffusivities(self) -> np.ndarray:
        return _frozen_array([s.diffusivity_m2_s for s in self.species])

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.species)

    def with_concentrations(self, conc, jv: float | None = None) -> "MixtureState":
        return MixtureState(
            concentrations=conc,
            mask=self.mask,
            species=self.species,
            jv=self.jv if jv is None else float(jv),
        )

    def index_of(self, name: str) -> int:
        for i, s in enumerate(self.species):
            if s.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class MembraneParams:
    """The four fitted membrane descriptors plus fixed dielectric constants.

    ``zeta_m`` (polymer matrix dielectric constant) is carried for reference
    only; the default dielectric-exclusion model uses the Born term with
    ``zeta_p`` and does not consume it.
    """

    r_p_nm: float                 # pore radius [nm]
    dx_e_um: float                # active layer thickness [um]
    zeta_p: float                 # pore dielectric constant
    chi_d_mol_m3: float           # volumetric fixed charge density [mol/m^3]
    zeta_b: float = 78.54         # bulk water dielectric constant
    zeta_m: float = 4.5           # polymer matrix dielectric constant (informational)

    def __post_init__(self):
        if not self.r_p_nm > 0:
            raise InvalidInputError("pore radius must be positive")
        if not self.dx_e_um > 0:
            raise InvalidInputError("active layer thickness must be positive")
        if not (1.0 < self.zeta_p <= self.zeta_b):
            raise InvalidInputError(
                f"pore dielectric constant must lie in (1, {self.zeta_b}], got {self.zeta_p}"
            )

    @property
    def r_p_m(self) -> float:
        return self.r_p_nm * 1e-9

    @property
    def dx_e_m(self) -> float:
        return self.dx_e_um * 1e-6

    @classmethod
    def from_json(cls, path) -> "MembraneParams":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            r_p_nm=raw["r_p_nm"],
            dx_e_um=raw["dx_e_um"],
            zeta_p=raw["zeta_p"],
            chi_d_mol_m3=raw["chi_d_mol_m3"],
            zeta_b=raw.get("zeta_b", 78.54),
            zeta_m=raw.get("zeta_m", 4.5),
        )

    def to_dict(self) -> dict:
        return {
            "r_p_nm": self.r_p_nm,
            "dx_e_um": self.dx_e_um,
            "zeta_p": self.zeta_p,
            "chi_d_mol_m3": self.chi_d_mol_m3,
            "zeta_b": self.zeta_b,
            "zeta_m": self.zeta_m,
        }


# Regressed polyamide NF parameter set shipped as the stock membrane for
# data generation and examples.
DEFAULT_MEMBRANE = MembraneParams(
    r_p_nm=0.51, dx_e_um=1.27, zeta_p=43.56, chi_d_mol_m3=-51.23
)


def project_electroneutral(h, z, m=None) -> np.ndarray:
    """Orthogonally project ``h`` onto the electroneutral hyperplane z_m . h = 0.

    The projection acts in the masked subspace only: the valence vector is
    zeroed wherever the mask is off, so absent species can never absorb
    charge, and masked-out coordinates pass through unchanged.

    Parameters
    ----------
    h : vector (d,) or batch (B, d) to project.
    z : integer valences, (d,).
    m : optional boolean mask, (d,); defaults to all-on.

    Returns
    -------
    h_perp with ``z_m . h_perp == 0`` up to roundoff.
    """
    h = np.asarray(h, dtype=float)
    z = np.asarray(z, dtype=float)
    if m is None:
        zm = z
    else:
        zm = np.where(np.asarray(m, dtype=bool), z, 0.0)
    denom = float(zm @ zm)
    if denom == 0.0:
        raise DegenerateProjectionError("masked valence vector is identically zero")
    coef = (h @ zm) / denom
    return h - np.multiply.outer(coef, zm) if h.ndim > 1 else h - coef * zm


def charge_imbalance(conc, z, m=None) -> float:
    """Relative net-charge imbalance |sum z_j C_j| / sum |z_j| C_j (0 for empty)."""
    conc = np.asarray(conc, dtype=float)
    z = np.asarray(z, dtype=float)
    if m is not None:
        z = np.where(np.asarray(m, dtype=bool), z, 0.0)
    scale = float(np.abs(z) @ conc)
    if scale == 0.0:
        return 0.0
    return abs(float(z @ conc)) / scale


def validate_feed(
    state: MixtureState,
    eps_en: float = EPS_ELECTRONEUTRAL,
    repair: bool = True,
    repair_threshold: float = REPAIR_THRESHOLD,
) -> MixtureState:
    """Check (and optionally repair) the feed electroneutrality invariant.

    Exactly neutral feeds pass through unchanged.  Feeds with a relative
    imbalance at or below ``repair_threshold`` are repaired by projection
    onto the neutral hyperplane followed by clamping to non-negative values
    (when ``repair`` is on); anything worse raises
    :class:`~ionflux.errors.InvalidFeedError`.  After repair the residual
    imbalance must satisfy ``eps_en``.
    """
    conc = state.concentrations
    if np.any(conc < 0):
        raise InvalidFeedError("negative feed concentration")
    imbalance = charge_imbalance(conc, state.valences, state.mask)
    if imbalance == 0.0:
        return state
    if imbalance > repair_threshold:
        raise InvalidFeedError(
            f"feed charge imbalance {imbalance:.3e} exceeds repair threshold "
            f"{repair_threshold:.1e}"
        )
    if not repair:
        if imbalance <= eps_en:
            return state
        raise InvalidFeedError(
            f"feed charge imbalance {imbalance:.3e} exceeds tolerance {eps_en:.1e} "
            "and repair is disabled"
        )
    repaired = np.array(conc)
    z = state.valences
    # Clamping can reintroduce a tiny imbalance; a couple of passes settle it.
    for _ in range(4):
        repaired = project_electroneutral(repaired, z, state.mask)
        repaired = np.maximum(repaired, 0.0)
        if charge_imbalance(repaired, z, state.mask) <= eps_en:
            break
    else:
        raise InvalidFeedError("feed repair failed to reach the neutrality tolerance")
    return state.with_concentrations(repaired)


def load_ion_database(path) -> dict[str, IonSpecies]:
    """Load a JSON array of ion records keyed by name.

    Schema per record: ``name``, ``z``, ``stokes_radius_nm``,
    ``cavity_radius_nm``, ``diffusivity_m2_s``.
    """
    with open(path) as fh:
        raw = json.load(fh)
    ions: dict[str, IonSpecies] = {}
    for rec in raw:
        ion = IonSpecies(
            name=rec["name"],
            z=int(rec["z"]),
            stokes_radius_nm=float(rec["stokes_radius_nm"]),
            cavity_radius_nm=float(rec["cavity_radius_nm"]),
            diffusivity_m2_s=float(rec["diffusivity_m2_s"]),
        )
        if ion.name in ions:
            raise InvalidInputError(f"duplicate ion name {ion.name!r} in database")
        ions[ion.name] = ion
    return ions


def builtin_ion_database() -> dict[str, IonSpecies]:
    """The database bundled with the package (common aqueous ions at 25 C)."""
    return load_ion_database(Path(__file__).parent / "data" / "ions.json")


def make_mixture(
    ions: Sequence[IonSpecies],
    concentrations: Iterable[float],
    jv: float = 0.0,
    width: int | None = None,
) -> MixtureState:
    """Build a MixtureState, optionally padding with masked-out slots to ``width``.

    Padding slots reuse the last species record (their mask is off, so the
    record is never consulted); this keeps run-level vector widths uniform.
    """
    ions = list(ions)
    conc = [float(c) for c in concentrations]
    if len(ions) != len(conc):
        raise InvalidInputError("species/concentration length mismatch")
    mask = [True] * len(ions)
    if width is not None:
        if width < len(ions):
            raise InvalidInputError("width smaller than species count")
        pad = width - len(ions)
        if pad and not ions:
            raise InvalidInputError("cannot pad an empty mixture")
        ions = ions + [
            replace(ions[-1], name=f"_pad{i}") for i in range(pad)
        ]
        conc = conc + [0.0] * pad
        mask = mask + [False] * pad
    return MixtureState(
        concentrations=np.array(conc),
        mask=np.array(mask),
        species=tuple(ions),
        jv=jv,
    )
