"""Surrogate training: data generation, losses, Adam, and evaluation.

Pre-training fits the neural ODE to converged continuum-solver curves over
space-filling feed compositions; fine-tuning continues on measured records,
drawing one Gaussian sample per record per epoch from its reported spread so
the network sees the measurement uncertainty instead of a single frozen
copy.  Both stages run Adam on the flat parameter vector with the learning
rate halved on a fixed epoch period, batching experiments that share a flux
grid so each batch costs one forward integration and one adjoint sweep.

Every random choice (shuffling, Gaussian draws) is a pure function of the
configured seed, the stage, and the epoch, so training runs are replayable.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import qmc

from .calibrate import RejectionRecord
from .chem import DEFAULT_MEMBRANE, builtin_ion_database, make_mixture
from .datasets import MeasuredDataset, SimulatedDataset, records_by_experiment
from .enp import SolverConfig, default_flux_grid, solve_rejection
from .errors import (
    DataQualityError,
    InvalidInputError,
    NumericalBreakdownError,
    TrainingAbortError,
    UnsupportedDimensionError,
    UnsupportedSpeciesError,
)
from .node import ModelState, adjoint_gradients, integrate, save_checkpoint

__all__ = [
    "TrainConfig",
    "AdamState",
    "EvalReport",
    "sobol_compositions",
    "generate_pretrain_data",
    "loss_pretrain",
    "loss_finetune",
    "adam_init",
    "adam_step",
    "train",
    "evaluate",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule; the defaults follow the training protocol."""

    batch_size: int = 32
    lr0: float = 1e-3
    halve_every: int = 200
    epochs: int = 1000
    seed: int = 0
    replay_fraction: float = 0.0
    freeze_draws: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")
        if not self.lr0 > 0:
            raise InvalidInputError("lr0 must be positive")
        if self.halve_every < 1:
            raise InvalidInputError("halving period must be at least 1 epoch")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise InvalidInputError("replay_fraction must lie in [0, 1]")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.lr0 / 2 ** (epoch // config.halve_every)


def sobol_compositions(species, bounds, count, skip: int = 1):
    """Low-discrepancy feed compositions, log-uniform then made neutral.

    Coordinates of the Sobol sequence map through
    ``10**(log10(c_min) + u * (log10(c_max) - log10(c_min)))`` per ion; the
    anion sub-vector is then rescaled uniformly so the feed carries zero net
    charge (an exact operation).  ``skip`` drops leading points (the first
    point of the unscrambled sequence is the origin, skipped by default).
    """
    c_min, c_max = float(bounds[0]), float(bounds[1])
    if not 0 < c_min < c_max:
        raise InvalidInputError("bounds must satisfy 0 < c_min < c_max")
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    db = builtin_ion_database()
    ions = [db[s] if isinstance(s, str) else s for s in species]
    z = np.array([float(i.z) for i in ions])
    if not (np.any(z > 0) and np.any(z < 0)):
        raise InvalidInputError("need at least one cation and one anion")
    try:
        sob = qmc.Sobol(d=len(ions), scramble=False)
    except ValueError as exc:
        raise UnsupportedDimensionError(str(exc))
    if skip:
        sob.fast_forward(skip)
    with warnings.catch_warnings():
        # balance warning for non-power-of-two counts is qmc bookkeeping
        warnings.simplefilter("ignore", UserWarning)
        u = sob.random(count)
    lg = np.log10(c_min) + u * (np.log10(c_max) - np.log10(c_min))
    conc = 10.0 ** lg
    cat = z > 0
    pos = conc[:, cat] @ z[cat]
    neg = conc[:, ~cat] @ (-z[~cat])
    conc[:, ~cat] *= (pos / neg)[:, None]
    return [make_mixture(ions, row) for row in conc]


def _gen_one(args):
    """Per-feed worker: rows plus the count of failed flux points."""
    index, feed, membrane, grid, solver_config, prefix = args
    curve = solve_rejection(feed, membrane, solver_config, flux_grid=grid,
                            on_error="skip")
    rows = []
    exp_id = f"{prefix}{index:05d}"
    for pt in curve.points:
        for j in range(feed.d):
            if not feed.mask[j]:
                continue
            rows.append(RejectionRecord(
                experiment_id=exp_id, ion=feed.species[j].name,
                z=int(feed.species[j].z),
                feed_mol_m3=float(feed.concentrations[j]),
                jv_m_s=float(pt.jv),
                permeate_mol_m3=float(pt.permeate.concentrations[j]),
                sigma_mol_m3=0.0,
            ))
    return rows, len(curve.failures)


def generate_pretrain_data(feeds, membrane=None, flux_grid=None,
                           solver_config=None, max_failure_fraction: float = 0.1,
                           id_prefix: str = "sim", jobs: int = 1) -> SimulatedDataset:
    """Continuum-solver curves over the feeds, packed as simulated records.

    Non-converged flux points are skipped and counted; if more than
    ``max_failure_fraction`` of all points fail, the whole dataset is
    rejected with :class:`DataQualityError` rather than silently thinned.
    """
    feeds = list(feeds)
    if not feeds:
        raise InvalidInputError("no feeds supplied")
    membrane = membrane or DEFAULT_MEMBRANE
    solver_config = solver_config or SolverConfig()
    grid = default_flux_grid() if flux_grid is None else np.asarray(flux_grid, float)
    tasks = [(k, feed, membrane, grid, solver_config, id_prefix)
             for k, feed in enumerate(feeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_gen_one, tasks, chunksize=4))
    else:
        results = [_gen_one(t) for t in tasks]
    records = []
    n_failed = 0
    for rows, failures in results:
        records.extend(rows)
        n_failed += failures
    total = len(feeds) * grid.size
    logger.info("generated %d rows from %d feeds; %d/%d flux points failed",
                len(records), len(feeds), n_failed, total)
    if n_failed > max_failure_fraction * total:
        raise DataQualityError(
            f"{n_failed}/{total} flux points failed to converge "
            f"(limit {max_failure_fraction:.0%})"
        )
    return SimulatedDataset(records=tuple(records))


def loss_pretrain(pred, targets, mask) -> float:
    """Mean squared error over masked-in entries only."""
    pred = np.asarray(pred, float)
    targets = np.asarray(targets, float)
    w = np.asarray(mask, float)
    n = float(w.sum())
    if n == 0:
        raise InvalidInputError("mask selects no entries")
    return float(np.sum(((pred - targets) * w) ** 2) / n)


def gaussian_draws(mu, sigma, rng):
    """One sample per record, clamped to physical (non-negative) values."""
    draws = mu + sigma * rng.standard_normal(np.shape(mu))
    return np.maximum(draws, 0.0)


def loss_finetune(pred, mu, sigma, mask, rng) -> float:
    """Masked MSE against fresh Gaussian draws from (mu, sigma).

    With sigma identically zero this is exactly the deterministic MSE
    against mu; the expectation over draws is MSE(pred, mu) plus the mean
    variance (up to the non-negativity clamp).
    """
    return loss_pretrain(pred, gaussian_draws(np.asarray(mu, float),
                                              np.asarray(sigma, float), rng), mask)


@dataclass(frozen=True)
class AdamState:
    """Functional optimizer state; each step returns a new instance."""

    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(theta, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    theta = np.asarray(theta, float)
    return AdamState(theta=theta, m=np.zeros_like(theta),
                     v=np.zeros_like(theta), t=0,
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, grads, lr: float) -> AdamState:
    """Bias-corrected Adam update; non-finite gradients abort training."""
    g = np.asarray(grads, float)
    if not np.all(np.isfinite(g)):
        raise TrainingAbortError("non-finite gradient entries")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, theta=theta, m=m, v=v, t=t)


@dataclass(frozen=True)
class _Sample:
    """One experiment aligned to model slots."""

    exp_id: str
    h0: np.ndarray       # (d,)
    mask: np.ndarray     # (d,) float
    jvs: np.ndarray      # (T,) ascending
    mu: np.ndarray       # (T, d)
    sigma: np.ndarray    # (T, d)
    tmask: np.ndarray    # (T, d) float, 1 where a record exists


def _build_samples(dataset, model: ModelState):
    slot = {name: i for i, name in enumerate(model.species)}
    samples = []
    for exp_id, recs in records_by_experiment(dataset.records).items():
        d = model.d
        h0 = np.zeros(d)
        mask = np.zeros(d)
        for r in recs:
            if r.ion not in slot:
                raise UnsupportedSpeciesError(
                    f"experiment {exp_id}: species {r.ion!r} is not among the "
                    f"model's species {list(model.species)}"
                )
            i = slot[r.ion]
            h0[i] = r.feed_mol_m3
            mask[i] = 1.0
        jvs = np.array(sorted({r.jv_m_s for r in recs}))
        jindex = {jv: k for k, jv in enumerate(jvs)}
        mu = np.zeros((jvs.size, d))
        sigma = np.zeros((jvs.size, d))
        tmask = np.zeros((jvs.size, d))
        for r in recs:
            k, i = jindex[r.jv_m_s], slot[r.ion]
            mu[k, i] = r.permeate_mol_m3
            sigma[k, i] = r.sigma_mol_m3
            tmask[k, i] = 1.0
        samples.append(_Sample(exp_id, h0, mask, jvs, mu, sigma, tmask))
    return samples


def _batches(samples, order, batch_size):
    """Chunk the shuffled samples, grouping only equal flux grids together."""
    pending = [samples[i] for i in order]
    batches = []
    while pending:
        head = pending.pop(0)
        batch = [head]
        keep = []
        for s in pending:
            if len(batch) < batch_size and s.jvs.shape == head.jvs.shape \
                    and np.array_equal(s.jvs, head.jvs):
                batch.append(s)
            else:
                keep.append(s)
        pending = keep
        batches.append(batch)
    return batches


def _batch_loss_grads(model, batch, targets, integration):
    """Masked MSE and its parameter gradient for one batch of experiments."""
    h0 = np.stack([s.h0 for s in batch])
    mask = np.stack([s.mask for s in batch])
    tmask = np.stack([s.tmask for s in batch], axis=1)    # (T, B, d)
    jvs = batch[0].jvs
    pred = integrate(model, h0, jvs, config=integration, mask=mask)
    zdot = np.abs(np.einsum("tbd,bd->tb", pred, model.z[None, :] * mask))
    scale = np.sum(np.abs(pred) * mask, axis=2) + 1e-300
    if np.any(zdot > 1e-6 * scale):
        raise NumericalBreakdownError(
            "integrated state lost electroneutrality; check the mask/valences"
        )
    n = float(tmask.sum())
    diff = (pred - targets) * tmask
    loss = float(np.sum(diff * diff) / n)
    lg = 2.0 * diff / n
    gtheta, _ = adjoint_gradients(model, h0, jvs, lg, config=integration,
                                  mask=mask)
    return loss, n, gtheta


def _stage(model, state, samples, config, integration, stage_idx, stage_name,
           history, checkpoint_dir, replay_samples=None):
    n_replay = 0
    if replay_samples:
        n_replay = int(round(config.replay_fraction * len(replay_samples)))
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        rng = np.random.default_rng([config.seed, stage_idx, epoch])
        order = rng.permutation(len(samples))
        work = []
        for batch in _batches(samples, order, config.batch_size):
            work.append((batch, False))
        if n_replay:
            r_order = rng.permutation(len(replay_samples))[:n_replay]
            for batch in _batches(replay_samples, r_order, config.batch_size):
                work.append((batch, True))
        loss_sum = 0.0
        weight_sum = 0.0
        for batch, is_replay in work:
            if stage_name == "finetune" and not is_replay:
                targets = np.stack(
                    [gaussian_draws(s.mu, s.sigma, rng) for s in batch],
                    axis=1,
                )
            else:
                targets = np.stack([s.mu for s in batch], axis=1)
            model = model.with_theta(state.theta)
            loss, n, gtheta = _batch_loss_grads(model, batch, targets, integration)
            state = adam_step(state, gtheta, lr)
            loss_sum += loss * n
            weight_sum += n
        epoch_loss = loss_sum / weight_sum
        history.append({"stage": stage_name, "epoch": epoch, "lr": lr,
                        "loss": epoch_loss})
        if checkpoint_dir and (epoch + 1) % config.halve_every == 0:
            model = model.with_theta(state.theta)
            save_checkpoint(model, os.path.join(
                checkpoint_dir, f"{stage_name}_epoch{epoch + 1:05d}.json"))
    return model.with_theta(state.theta), state


def train(model: ModelState, sim: SimulatedDataset | None = None,
          meas: MeasuredDataset | None = None,
          config: TrainConfig | None = None, integration=None,
          checkpoint_dir=None):
    """Two-stage optimization; returns (trained model, per-epoch history).

    Stage one minimizes the masked MSE over the simulated curves; stage two
    (when measured data is given) restarts the schedule and minimizes the
    Gaussian-resampled loss over the measurements, optionally replaying a
    fraction of simulated experiments per epoch under the pretraining loss.
    """
    config = config or TrainConfig()
    if sim is None and meas is None:
        raise InvalidInputError("at least one dataset is required")
    if sim is not None and len(sim) == 0:
        raise InvalidInputError("simulated dataset is empty")
    if meas is not None and len(meas) == 0:
        raise InvalidInputError("measured dataset is empty")
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    history = []
    state = adam_init(model.theta)
    sim_samples = _build_samples(sim, model) if sim is not None else []
    if sim_samples:
        model, state = _stage(model, state, sim_samples, config, integration,
                              0, "pretrain", history, checkpoint_dir)
    if meas is not None:
        if config.replay_fraction > 0:
            if sim is None:
                raise InvalidInputError(
                    "replay_fraction needs the simulated dataset"
                )
            if len(meas) > len(sim) / 10:
                raise InvalidInputError(
                    f"replay requires many more simulated than measured rows "
                    f"({len(meas)} measured vs {len(sim)} simulated)"
                )
        meas_samples = _build_samples(meas, model)
        if config.freeze_draws:
            # one frozen draw per sample, independent of epoch and batching
            frz = np.random.default_rng([config.seed, 1, 0])
            meas_samples = [
                replace(s, mu=gaussian_draws(s.mu, s.sigma, frz) * s.tmask,
                        sigma=np.zeros_like(s.sigma))
                for s in meas_samples
            ]
        state = adam_init(model.theta)   # fresh moments for the new objective
        model, state = _stage(model, state, meas_samples, config, integration,
                              1, "finetune", history, checkpoint_dir,
                              replay_samples=sim_samples or None)
    return model, history


@dataclass(frozen=True)
class EvalReport:
    """Rejection-space errors plus plot-ready parity rows."""

    mae_percent: float
    rmse_percent: float
    per_ion: dict
    parity: tuple   # rows (experiment_id, ion, jv_m_s, r_measured, r_predicted)

    def to_dict(self) -> dict:
        return {
            "mae_percent": self.mae_percent,
            "rmse_percent": self.rmse_percent,
            "per_ion": self.per_ion,
            "n_records": len(self.parity),
        }


def evaluate(model: ModelState, test: MeasuredDataset, integration=None) -> EvalReport:
    """Mean absolute rejection error (percent) of the surrogate on records.

    The primary metric is the mean over records of |R_pred - R_meas| in
    rejection space, scaled to percent; RMSE is reported alongside.  Parity
    rows carry one (measured, predicted) pair per record.
    """
    if len(test) == 0:
        raise InvalidInputError("test dataset is empty")
    samples = _build_samples(test, model)
    parity = []
    by_ion: dict = {}
    for s in samples:
        pred = integrate(model, s.h0, s.jvs, config=integration, mask=s.mask)
        for k in range(s.jvs.size):
            for i in range(model.d):
                if not s.tmask[k, i]:
                    continue
                r_meas = 1.0 - s.mu[k, i] / s.h0[i]
                r_pred = 1.0 - pred[k, i] / s.h0[i]
                ion = model.species[i]
                parity.append((s.exp_id, ion, float(s.jvs[k]),
                               float(r_meas), float(r_pred)))
                by_ion.setdefault(ion, []).append(r_pred - r_meas)
    errs = np.array([row[4] - row[3] for row in parity])
    per_ion = {
        ion: {
            "n": len(v),
            "mae_percent": float(100.0 * np.mean(np.abs(v))),
            "rmse_percent": float(100.0 * np.sqrt(np.mean(np.square(v)))),
        }
        for ion, v in sorted(by_ion.items())
    }
    return EvalReport(
        mae_percent=float(100.0 * np.mean(np.abs(errs))),
        rmse_percent=float(100.0 * np.sqrt(np.mean(errs ** 2))),
        per_ion=per_ion,
        parity=tuple(parity),
    )
