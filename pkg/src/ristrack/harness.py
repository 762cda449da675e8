"""Seeded Monte Carlo experiment runner.

One experiment sweeps transmit power over a fixed scene: per power point
and trial, a random-walk trajectory is simulated, beams are planned each
slot from the tracker's current belief, and the tracker consumes the
resulting snapshots.  The position/angle error bound is accumulated along
the true trajectory under the plans the system actually produced, so the
reported bound describes the realized measurement schedule.

Reproducibility: every random stream derives from the master seed by
counter-based splitting, keyed per trial (trajectories and the initial
position prior, shared across the power sweep) or per (power, trial)
(measurement noise, random plans).  Results are therefore identical
across repeat runs and across worker counts.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment

from .aoa import VonMisesMsg
from .aoa import estimate as estimate_aoa
from .beamforming import (
    GainPredictor,
    calibrate_gain,
    directional_plan,
    estimate_aod,
    optimize_p1_agdm,
    predict_gains,
    random_plan,
)
from .crb import ParamVector, aoa_bound, bfim_step, fim_single_slot, initial_bfim, position_bcrb
from .geometry import aoa_cosine, aoa_gradient
from .signal import (
    SceneConfig,
    SlotGroundTruth,
    dbm_to_watts,
    default_scene,
    free_space_gain,
    generate_trajectory,
    slot_truth,
)
from .tracker import GaussianMsg, SlotEstimate, TrackerConfig, init_state, run_slot

__all__ = [
    "MODES",
    "CSV_COLUMNS",
    "ExperimentSpec",
    "MetricsRow",
    "bound_curve",
    "compute_rmse",
    "demo_scene",
    "demo_tracker",
    "run_experiment",
    "run_baseline",
    "write_csv",
]

MODES = ("directional", "bcrb", "random")

CSV_COLUMNS = (
    "method",
    "power_dbm",
    "n_ris_elements",
    "rmse_position_m",
    "rmse_aoa",
    "bcrb_position_m",
    "bcrb_aoa",
    "runtime_ms",
)

def demo_scene(n_ris: int = 64, n_slots: int = 50, n_paths: int = 7) -> SceneConfig:
    """Desk-scale preset of the reference scene: short runs for CI and demos.

    Delegates to :func:`ristrack.signal.default_scene` with a reduced slot
    count.  `n_paths` < 7 keeps only the first surfaces of the anchor list,
    leaving the remaining geometry unchanged.
    """
    if not 2 <= n_paths <= 7:
        raise ValueError("demo scene supports 2..7 surfaces")
    scene = default_scene(n_ris=n_ris, n_slots=n_slots)
    if n_paths == 7:
        return scene
    return replace(scene,
                   ris_positions=scene.ris_positions[:n_paths],
                   ris_directions=scene.ris_directions[:n_paths],
                   reflection=scene.reflection[:n_paths])


def demo_tracker(scene: SceneConfig | None = None) -> TrackerConfig:
    """Tracker settings matched to the demo scene's mobility model."""
    cov = np.diag([0.03, 0.03, 0.01]) if scene is None else scene.model_cov
    return TrackerConfig(model_cov=cov)


def bound_curve(scene: SceneConfig, power_dbm, trials: int = 4,
                seed: int = 0) -> list[tuple[float, float]]:
    """Accuracy floor vs transmit power, without running the estimator.

    Accumulates the recursive error bound along simulated trajectories
    under ideal directional plans aimed at the true position, then reduces
    exactly like the experiment's bound columns.  Trajectories are shared
    across power points (same seed streams), so the returned position
    curve is monotone in power by construction of the information
    recursion.  Useful for sizing power or element budgets and as the
    reference overlay in reports.

    Returns one (position_bound_m, aoa_bound) pair per power point.
    """
    k = scene.n_paths
    out = []
    for p in power_dbm:
        power_w = dbm_to_watts(float(p))
        pos_terms, aoa_terms = [], []
        for trial in range(trials):
            traj_rng, _, _ = _trial_rngs(seed, 0, trial)
            traj = generate_trajectory(scene, traj_rng)
            j = initial_bfim(np.eye(3), k)
            for t in range(scene.n_slots):
                rho_ub = _model_rho(scene, traj[t], power_w)
                preds = _predictors(scene, traj[t], rho_ub, np.zeros(k, bool))
                plan = directional_plan(preds, scene)
                gains = predict_gains(preds, plan, scene)
                params = ParamVector.from_gains(traj[t], gains)
                j = bfim_step(
                    j, fim_single_slot(params, scene, scene.noise_power_w),
                    scene.model_cov)
                pos_terms.append(np.sum(position_bcrb(j)))
                aoa_terms.append(np.mean(aoa_bound(j, params, scene,
                                                   form="standard")))
        out.append((float(np.sqrt(np.mean(pos_terms))),
                    float(np.sqrt(np.mean(aoa_terms)))))
    return out


@dataclass
class ExperimentSpec:
    """Everything one sweep needs; fully determines the output."""

    scene: SceneConfig
    tracker: TrackerConfig
    mode: str = "directional"
    baseline: bool = False
    power_dbm: list = field(default_factory=lambda: [0.0])
    trials: int = 1
    seed: int = 0
    out_path: str | Path | None = None
    workers: int = 1
    include_runtime: bool = True
    plan_max_outer: int = 15        # bound-driven plan refinement budget
    plan_tol: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.trials < 1:
            raise ValueError("at least one trial required")
        self.power_dbm = [float(p) for p in self.power_dbm]
        if not self.power_dbm:
            raise ValueError("power sweep must be non-empty")
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass
class MetricsRow:
    """One aggregated line of the output table."""

    method: str
    power_dbm: float
    n_ris_elements: int
    rmse_position_m: float
    rmse_aoa: float
    bcrb_position_m: float
    bcrb_aoa: float
    runtime_ms: float

    def __post_init__(self):
        for name in ("rmse_position_m", "rmse_aoa", "bcrb_position_m", "bcrb_aoa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def compute_rmse(estimates, truths) -> tuple[float, float]:
    """Root-mean-square position and angle errors over trials.

    Parameters
    ----------
    estimates : sequence over trials of sequences of SlotEstimate
    truths : sequence over trials of sequences of SlotGroundTruth

    Returns
    -------
    (rmse_position, rmse_aoa)
        Position: sqrt of the trial-averaged per-slot mean squared
        Euclidean error.  Angle: likewise over all slots and paths of the
        arrival-cosine errors.
    """
    if len(estimates) != len(truths):
        raise ValueError("trial counts differ between estimates and truth")
    if not estimates:
        raise ValueError("no trials given")
    pos_terms, aoa_terms = [], []
    for est_traj, true_traj in zip(estimates, truths):
        if len(est_traj) != len(true_traj):
            raise ValueError("slot counts differ between estimates and truth")
        if not est_traj:
            raise ValueError("empty trajectory")
        dp = np.array([e.position - t.user_position
                       for e, t in zip(est_traj, true_traj)])
        da = np.array([e.aoa_means - t.aoas
                       for e, t in zip(est_traj, true_traj)])
        pos_terms.append(np.mean(np.sum(dp**2, axis=1)))
        aoa_terms.append(np.mean(da**2))
    return float(np.sqrt(np.mean(pos_terms))), float(np.sqrt(np.mean(aoa_terms)))


def _trial_rngs(seed: int, power_index: int, trial: int):
    """Counter-split streams: trajectory(+prior), noise, random plans."""
    traj = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, trial)))
    noise = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(1, power_index, trial)))
    plan = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(2, power_index, trial)))
    return traj, noise, plan


def _model_rho(scene: SceneConfig, aim, power_w: float) -> NDArray[np.complex128]:
    """Free-space through-gain prediction at an assumed user position."""
    d1 = scene.bs_ris_distances()
    out = np.empty(scene.n_paths, complex)
    for i in range(scene.n_paths):
        d2 = float(np.linalg.norm(aim - scene.ris_positions[i]))
        out[i] = (np.sqrt(power_w) * scene.reflection[i]
                  * free_space_gain(float(d1[i]), d2, scene.wavelength))
    return out


def _predictors(scene: SceneConfig, aim, rho_ub, stale) -> list:
    theta_in = scene.ris_aoa_from_bs()
    psi_bs = scene.bs_aod()
    return [
        GainPredictor(complex(rho_ub[i]),
                      estimate_aod(aim, scene.ris_positions[i], scene.ris_directions[i]),
                      float(theta_in[i]), float(psi_bs[i]), bool(stale[i]))
        for i in range(scene.n_paths)
    ]


def _plan_slot(mode: str, predictors, aim, scene, model_cov, j_plan,
               plan_rng, max_outer: int, tol: float):
    if mode == "random":
        return random_plan(scene, plan_rng)
    plan = directional_plan(predictors, scene)
    if mode == "bcrb":
        plan = optimize_p1_agdm(predictors, aim, scene, model_cov, j_plan,
                                plan, max_outer=max_outer, tol=tol)
    return plan


def _run_trial(args):
    """Track one trajectory; returns estimates, truths, and bound traces."""
    scene, tracker, mode, power_w, seed, p_idx, trial, max_outer, tol = args
    k = scene.n_paths
    traj_rng, noise_rng, plan_rng = _trial_rngs(seed, p_idx, trial)
    traj = generate_trajectory(scene, traj_rng)
    prior_mean = scene.initial_position + traj_rng.standard_normal(3)
    tcfg = replace(tracker, initial_prior=GaussianMsg(prior_mean, np.eye(3)))
    state = init_state(tcfg)
    j_plan = initial_bfim(np.eye(3), k)
    j_true = initial_bfim(np.eye(3), k)
    rho_ub = _model_rho(scene, prior_mean, power_w)
    stale = np.zeros(k, bool)
    plan_prev = None
    gains_prev = None
    estimates, truths = [], []
    bound_pos = np.empty(scene.n_slots)
    bound_aoa = np.empty((scene.n_slots, k))
    for t in range(scene.n_slots):
        aim = state.forward.mean
        if plan_prev is not None:
            for i in range(k):
                aod_i = estimate_aod(aim, scene.ris_positions[i],
                                     scene.ris_directions[i])
                rho_ub[i], stale[i] = calibrate_gain(
                    complex(gains_prev[i]), plan_prev, aod_i, scene, i,
                    previous=complex(rho_ub[i]))
        predictors = _predictors(scene, aim, rho_ub, stale)
        plan = _plan_slot(mode, predictors, aim, scene, tcfg.model_cov,
                          j_plan, plan_rng, max_outer, tol)
        truth = slot_truth(scene, traj[t], plan.ris_phases, plan.bs_beam,
                           power_w, noise_rng)
        state, est = run_slot(state, truth.received, tcfg, scene)
        estimates.append(est)
        truths.append(truth)
        plan_prev, gains_prev = plan, est.gains
        # belief-side information recursion used for the next slot's planning
        j_meas = fim_single_slot(ParamVector.from_gains(est.position, est.gains),
                                 scene, scene.noise_power_w)
        j_plan = bfim_step(j_plan, j_meas, tcfg.model_cov)
        # reported bound: true state, realized plan
        params_true = ParamVector.from_gains(truth.user_position, truth.gains)
        j_true = bfim_step(
            j_true, fim_single_slot(params_true, scene, scene.noise_power_w),
            scene.model_cov)
        bound_pos[t] = float(np.sum(position_bcrb(j_true)))
        bound_aoa[t] = aoa_bound(j_true, params_true, scene, form="standard")
    return estimates, truths, bound_pos, bound_aoa


def _cone_fix(scene: SceneConfig, aoa_hat, start, weights=None) -> NDArray[np.float64]:
    """Weighted least-squares intersection of the arrival-cosine cones.

    Damped Gauss-Newton on the residuals theta_i(p) - aoa_hat_i; weights
    (typically the angle posteriors' concentrations) keep cones from
    paths that carried no energy from poisoning the fix.  The result is
    clipped into the scene cuboid.
    """
    p = np.array(start, float)
    lam = 1e-3
    e_u = scene.user_direction
    if weights is None:
        w = np.ones(scene.n_paths)
    else:
        w = np.asarray(weights, float)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            return np.clip(p, scene.bounds[:, 0], scene.bounds[:, 1])
        w = w * (scene.n_paths / total)
    sqw = np.sqrt(w)

    def residual(q):
        if np.min(np.linalg.norm(scene.ris_positions - q, axis=1)) < 1e-6:
            return None  # on top of an anchor: cones undefined, reject step
        return sqw * np.array([
            aoa_cosine(scene.ris_positions[i], q, e_u) - aoa_hat[i]
            for i in range(scene.n_paths)
        ])

    r = residual(p)
    if r is None:
        return np.clip(p + 1e-3, scene.bounds[:, 0], scene.bounds[:, 1])
    cost = float(r @ r)
    for _ in range(50):
        jac = sqw[:, None] * np.array([aoa_gradient(scene.ris_positions[i], p, e_u)
                                       for i in range(scene.n_paths)])
        g = jac.T @ r
        h = jac.T @ jac
        accepted = False
        for _ in range(12):
            try:
                step = np.linalg.solve(h + lam * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            q = np.clip(p + step, scene.bounds[:, 0], scene.bounds[:, 1])
            rq = residual(q)
            if rq is None:
                lam *= 10.0
                continue
            cq = float(rq @ rq)
            if cq < cost:
                p, r, cost = q, rq, cq
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or np.linalg.norm(step) < 1e-9:
            break
    return np.clip(p, scene.bounds[:, 0], scene.bounds[:, 1])


def _run_baseline_trial(args):
    """Per-slot independent estimation on the same trajectory streams.

    Flat angle priors every slot, and each position solve restarts from
    the center of the service volume, so no estimator state crosses slot
    boundaries.  Beams still aim at the previous slot's fix (the
    initial-prior mean on the first slot) since transmission needs a
    pointing decision regardless of the estimator.
    """
    scene, mode, power_w, seed, p_idx, trial = args
    k = scene.n_paths
    traj_rng, noise_rng, plan_rng = _trial_rngs(seed, p_idx, trial)
    traj = generate_trajectory(scene, traj_rng)
    aim = scene.initial_position + traj_rng.standard_normal(3)
    flat = [VonMisesMsg(0.0, 0.0) for _ in range(k)]
    center = scene.bounds.mean(axis=1)
    estimates, truths = [], []
    bound_pos = np.empty(scene.n_slots)
    bound_aoa = np.empty((scene.n_slots, k))
    for t in range(scene.n_slots):
        rho_ub = _model_rho(scene, aim, power_w)
        predictors = _predictors(scene, aim, rho_ub, np.zeros(k, bool))
        if mode == "random":
            plan = random_plan(scene, plan_rng)
        else:
            plan = directional_plan(predictors, scene)
        truth = slot_truth(scene, traj[t], plan.ris_phases, plan.bs_beam,
                           power_w, noise_rng)
        post = estimate_aoa(truth.received, flat)
        cand = np.array([m.mu / np.pi for m in post.modes])
        # oracle association: the baseline is graded on its best pairing
        cost = (cand[None, :] - truth.aoas[:, None]) ** 2
        _, perm = linear_sum_assignment(cost)
        aoa_hat = cand[perm]
        conc = np.array([post.modes[j].kappa for j in perm])
        fix = _cone_fix(scene, aoa_hat, center, weights=conc)
        aim = fix
        estimates.append(SlotEstimate(
            position=fix,
            cov=np.eye(3),
            aoa_means=aoa_hat,
            gains=post.gain_mean[perm],
            flags=(),
            iterations=1,
        ))
        truths.append(truth)
        # no-prior comparator: single-slot information only
        params_true = ParamVector.from_gains(truth.user_position, truth.gains)
        j_slot = fim_single_slot(params_true, scene, scene.noise_power_w)
        bound_pos[t] = float(np.sum(position_bcrb(j_slot)))
        bound_aoa[t] = aoa_bound(j_slot, params_true, scene, form="standard")
    return estimates, truths, bound_pos, bound_aoa


def _map_trials(worker, arg_list, workers: int):
    if workers <= 1 or len(arg_list) <= 1:
        return [worker(a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, arg_list))


def _aggregate(method: str, p_dbm: float, scene: SceneConfig, results,
               runtime_ms: float) -> MetricsRow:
    estimates = [r[0] for r in results]
    truths = [r[1] for r in results]
    rmse_pos, rmse_aoa = compute_rmse(estimates, truths)
    bcrb_pos = float(np.sqrt(np.mean([r[2] for r in results])))
    bcrb_aoa = float(np.sqrt(np.mean([r[3] for r in results])))
    if rmse_pos < 0.8 * bcrb_pos or rmse_aoa < 0.8 * bcrb_aoa:
        # an unbiased estimator may dip below the bound by sampling noise,
        # but not this far; the estimator/bound pairing deserves a look
        warnings.warn(f"{method} at {p_dbm} dBm: RMSE below the lower bound "
                      "beyond sampling error")
    return MetricsRow(method, p_dbm, scene.n_ris, rmse_pos, rmse_aoa,
                      bcrb_pos, bcrb_aoa, runtime_ms)


def run_experiment(spec: ExperimentSpec) -> list[MetricsRow]:
    """Tracked runs over the power sweep; one row per sweep point."""
    rows = []
    for p_idx, p_dbm in enumerate(spec.power_dbm):
        t0 = time.perf_counter()
        args = [(spec.scene, spec.tracker, spec.mode, dbm_to_watts(p_dbm),
                 spec.seed, p_idx, trial, spec.plan_max_outer, spec.plan_tol)
                for trial in range(spec.trials)]
        results = _map_trials(_run_trial, args, spec.workers)
        runtime_ms = (time.perf_counter() - t0) * 1e3
        rows.append(_aggregate("bult", p_dbm, spec.scene, results, runtime_ms))
    return rows


def run_baseline(spec: ExperimentSpec) -> list[MetricsRow]:
    """Per-slot independent estimation over the same sweep."""
    rows = []
    for p_idx, p_dbm in enumerate(spec.power_dbm):
        t0 = time.perf_counter()
        args = [(spec.scene, spec.mode, dbm_to_watts(p_dbm), spec.seed,
                 p_idx, trial) for trial in range(spec.trials)]
        results = _map_trials(_run_baseline_trial, args, spec.workers)
        runtime_ms = (time.perf_counter() - t0) * 1e3
        rows.append(_aggregate("baseline", p_dbm, spec.scene, results,
                               runtime_ms))
    return rows


def write_csv(rows, path: str | Path, include_runtime: bool = True) -> None:
    """Write metric rows as UTF-8 CSV with a header line.

    Numbers are rendered with 12 significant digits, so files from equal
    results are byte-identical.  Dropping the runtime column makes the
    whole file deterministic for a given spec and seed.
    """
    cols = list(CSV_COLUMNS)
    if not include_runtime:
        cols.remove("runtime_ms")
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in rows:
                rec = []
                for c in cols:
                    v = getattr(row, c)
                    rec.append(v if isinstance(v, (str, int)) else format(v, ".12g"))
                writer.writerow(rec)
    except OSError as exc:
        raise OSError(f"writing {path} failed: {exc}") from exc
