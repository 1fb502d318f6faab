"""CSV-backed datasets shared by calibration, training, and evaluation.

One flat schema serves every stage: each row is a single ion's measured (or
simulated) permeate concentration at one flux within one experiment.  The
``provenance`` column distinguishes solver-generated rows from measured
ones; files written by older tools without that column load as measured.

All writes are atomic (temp file in the target directory, then rename), so
a crashed run never leaves a half-written dataset behind.
"""

from __future__ import annotations

import csv
import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .calibrate import RejectionRecord
from .chem import builtin_ion_database, charge_imbalance
from .errors import (
    DatasetParseError,
    DatasetValidationError,
    InvalidInputError,
)

__all__ = [
    "COLUMNS",
    "MeasuredDataset",
    "SimulatedDataset",
    "load_dataset",
    "write_dataset",
    "records_by_experiment",
]

COLUMNS = (
    "experiment_id", "ion", "z", "feed_mol_m3", "jv_m_s",
    "permeate_mol_m3", "sigma_mol_m3",
)
_PROVENANCE = "provenance"
# Feed neutrality gate per experiment; matches the solver's repair threshold.
FEED_IMBALANCE_TOL = 1e-6


@dataclass(frozen=True)
class MeasuredDataset:
    """Rows carrying measurement spreads; the fine-tuning/evaluation input."""

    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def experiment_ids(self):
        seen = []
        for r in self.records:
            if r.experiment_id not in seen:
                seen.append(r.experiment_id)
        return tuple(seen)


@dataclass(frozen=True)
class SimulatedDataset:
    """Converged solver outputs (sigma = 0 by construction); pretraining input."""

    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            if r.sigma_mol_m3 != 0.0:
                raise InvalidInputError(
                    f"simulated record {r.experiment_id}/{r.ion} carries a "
                    "nonzero sigma"
                )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def experiment_ids(self):
        seen = []
        for r in self.records:
            if r.experiment_id not in seen:
                seen.append(r.experiment_id)
        return tuple(seen)


def records_by_experiment(records):
    """Insertion-ordered {experiment_id: [records]}."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r.experiment_id, []).append(r)
    return groups


def _parse_row(row: dict, line: int) -> RejectionRecord:
    for col in COLUMNS:
        if row.get(col) in (None, ""):
            raise DatasetParseError(f"missing value for column {col!r}", line=line)
    try:
        z = int(row["z"])
    except ValueError:
        raise DatasetParseError(f"valence {row['z']!r} is not an integer", line=line)
    vals = {}
    for col in ("feed_mol_m3", "jv_m_s", "permeate_mol_m3", "sigma_mol_m3"):
        try:
            vals[col] = float(row[col])
        except ValueError:
            raise DatasetParseError(
                f"{col} value {row[col]!r} is not a number", line=line
            )
        if not np.isfinite(vals[col]):
            raise DatasetParseError(f"{col} is not finite", line=line)
    try:
        return RejectionRecord(
            experiment_id=row["experiment_id"], ion=row["ion"], z=z,
            feed_mol_m3=vals["feed_mol_m3"], jv_m_s=vals["jv_m_s"],
            permeate_mol_m3=vals["permeate_mol_m3"],
            sigma_mol_m3=vals["sigma_mol_m3"],
        )
    except InvalidInputError as exc:
        raise DatasetParseError(str(exc), line=line)


def _validate_experiments(records):
    """Cross-row consistency: one feed per experiment, neutral within tolerance."""
    db = builtin_ion_database()
    for exp_id, recs in records_by_experiment(records).items():
        feed_by_ion = {}
        for r in recs:
            if r.ion in feed_by_ion and feed_by_ion[r.ion] != (r.feed_mol_m3, r.z):
                raise DatasetValidationError(
                    f"experiment {exp_id}: ion {r.ion} appears with inconsistent "
                    "feed concentration or valence"
                )
            feed_by_ion.setdefault(r.ion, (r.feed_mol_m3, r.z))
            if r.ion in db and db[r.ion].z != r.z:
                raise DatasetValidationError(
                    f"experiment {exp_id}: ion {r.ion} has valence {db[r.ion].z}, "
                    f"row says {r.z}"
                )
        conc = np.array([v[0] for v in feed_by_ion.values()])
        z = np.array([float(v[1]) for v in feed_by_ion.values()])
        imb = charge_imbalance(conc, z)
        if imb > FEED_IMBALANCE_TOL:
            raise DatasetValidationError(
                f"experiment {exp_id}: feed charge imbalance {imb:.3e} exceeds "
                f"{FEED_IMBALANCE_TOL:.1e}"
            )


def load_dataset(path):
    """Parse and validate a dataset CSV.

    Returns :class:`SimulatedDataset` when every row is tagged simulated,
    otherwise :class:`MeasuredDataset`.  Parse failures name the 1-based
    file line; cross-row inconsistencies raise a validation error.
    """
    records = []
    provenances = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetParseError("file is empty (no header)", line=1)
        missing = [c for c in COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DatasetParseError(
                f"header is missing columns {missing}", line=1
            )
        for row in reader:
            line = reader.line_num
            records.append(_parse_row(row, line))
            provenances.append(row.get(_PROVENANCE) or "measured")
    if not records:
        warnings.warn(f"{path}: dataset has a header but no rows", stacklevel=2)
        return MeasuredDataset(records=())
    _validate_experiments(records)
    if all(p == "simulated" for p in provenances):
        return SimulatedDataset(records=tuple(records))
    return MeasuredDataset(records=tuple(records))


def write_dataset(path, dataset) -> None:
    """Atomically write a dataset with its provenance column."""
    provenance = (
        "simulated" if isinstance(dataset, SimulatedDataset) else "measured"
    )
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS + (_PROVENANCE,))
            for r in dataset.records:
                writer.writerow([
                    r.experiment_id, r.ion, r.z,
                    repr(r.feed_mol_m3), repr(r.jv_m_s),
                    repr(r.permeate_mol_m3), repr(r.sigma_mol_m3),
                    provenance,
                ])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
