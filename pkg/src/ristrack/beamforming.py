"""Per-slot beam design for the RIS reflection paths.

Three designs are produced from the previous slot's estimates: a
closed-form directional plan (each RIS steers its reflected lobe at the
predicted user, the BS splits power over the surfaces), a weighted
directional plan whose BS lobe weights minimize the predicted position
bound, and a joint plan refining all RIS phase profiles and the BS beam by
alternating projected gradient descent on the same bound.

The bound objective depends on a plan only through the K equivalent
complex gains, so gradients are computed by central differences with
respect to those gains and chained through the exact linear maps onto the
phase vectors and the beam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .crb import ParamVector, bfim_step, fim_single_slot, position_bcrb
from .geometry import Position3, aoa_cosine, steering
from .signal import SceneConfig, equivalent_gain

__all__ = [
    "BeamPlan",
    "GainPredictor",
    "estimate_aod",
    "calibrate_gain",
    "directional_pbf",
    "directional_bs_beam",
    "directional_plan",
    "predict_gains",
    "predicted_position_bound",
    "optimize_p2_weights",
    "optimize_p1_agdm",
    "random_plan",
]


@dataclass
class BeamPlan:
    """Feasible beam configuration: unit-modulus RIS phases, unit-norm beam."""

    ris_phases: NDArray[np.complex128]     # (K, N_R)
    bs_beam: NDArray[np.complex128]        # (N_B,)

    def __post_init__(self):
        phases = np.atleast_2d(np.asarray(self.ris_phases, complex))
        mags = np.abs(phases)
        if mags.min() < 1e-12:
            raise ValueError("RIS phase entries must be nonzero")
        self.ris_phases = phases / mags                  # exact projection
        beam = np.asarray(self.bs_beam, complex)
        norm = np.linalg.norm(beam)
        if norm < 1e-12:
            raise ValueError("BS beam must be nonzero")
        self.bs_beam = beam / norm


@dataclass
class GainPredictor:
    """Per-RIS state needed to predict the next slot's equivalent gain."""

    rho_ub: complex        # calibrated through-path gain (includes sqrt power)
    aod_ris: float         # estimated departure cosine toward the user
    aoa_ris: float         # known arrival cosine of the BS illumination
    aod_bs: float          # known departure cosine at the BS
    stale: bool = False    # calibration fell back to the previous value

    def __post_init__(self):
        vals = [self.rho_ub, self.aod_ris, self.aoa_ris, self.aod_bs]
        if not np.all(np.isfinite(np.abs(np.asarray(vals, complex)))):
            raise ValueError("predictor fields must be finite")


def estimate_aod(est_position: Position3, ris_position: Position3,
                 ris_direction: NDArray[np.float64]) -> float:
    """Departure cosine at an RIS toward the estimated user position."""
    return aoa_cosine(est_position, ris_position, ris_direction)


def _ris_factor(aod: float, aoa: float, phases: NDArray[np.complex128]) -> complex:
    a_out = steering(aod, phases.size)
    a_in = steering(aoa, phases.size)
    return complex(np.vdot(a_out, phases * a_in))


def calibrate_gain(rho_prev: complex, prev_plan: BeamPlan, aod_est: float,
                   scene: SceneConfig, index: int,
                   previous: complex | None = None) -> tuple[complex, bool]:
    """Back out the through-path gain from an estimated equivalent gain.

    Divides the tracker's gain estimate by the beam factor the previous
    plan would have produced at the newly estimated departure cosine.  A
    near-null denominator (|.| < 1e-9) carries no information; the
    `previous` calibration is then returned unchanged (zero if none) with
    the stale flag set.
    """
    theta_in = float(scene.ris_aoa_from_bs()[index])
    psi_bs = float(scene.bs_aod()[index])
    a_bs = steering(psi_bs, scene.n_bs)
    den = (_ris_factor(aod_est, theta_in, prev_plan.ris_phases[index])
           * np.vdot(a_bs, prev_plan.bs_beam))
    if abs(den) < 1e-9:
        return (previous if previous is not None else 0.0 + 0.0j), True
    return complex(rho_prev / den), False


def directional_pbf(aod_est: float, aoa_from_bs: float, n_ris: int) -> NDArray[np.complex128]:
    """Phase profile steering the reflection of the BS lobe at the user."""
    return steering(aod_est, n_ris) * np.conj(steering(aoa_from_bs, n_ris))


def directional_bs_beam(weights: NDArray[np.complex128], scene: SceneConfig) -> NDArray[np.complex128]:
    """Unit-norm BS beam with one weighted lobe per RIS."""
    weights = np.atleast_1d(np.asarray(weights, complex))
    psi = scene.bs_aod()
    if weights.size != psi.size:
        raise ValueError("one weight per RIS required")
    f = np.zeros(scene.n_bs, complex)
    for i, w in enumerate(weights):
        f += w * steering(float(psi[i]), scene.n_bs)
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise ValueError("weights produce a zero beam")
    return f / norm


def directional_plan(predictors, scene: SceneConfig,
                     weights: NDArray[np.complex128] | None = None) -> BeamPlan:
    """Closed-form plan: directional phases per RIS, multi-lobe BS beam."""
    k = len(predictors)
    phases = np.stack([directional_pbf(pr.aod_ris, pr.aoa_ris, scene.n_ris)
                       for pr in predictors])
    if weights is None:
        weights = np.full(k, 1.0 / np.sqrt(k), dtype=complex)
    return BeamPlan(phases, directional_bs_beam(weights, scene))


def predict_gains(predictors, plan: BeamPlan, scene: SceneConfig) -> NDArray[np.complex128]:
    """Equivalent gains each predictor expects under a candidate plan."""
    return np.array([
        equivalent_gain(pr.rho_ub, pr.aod_ris, pr.aoa_ris, pr.aod_bs,
                        plan.ris_phases[i], plan.bs_beam)
        for i, pr in enumerate(predictors)
    ])


def predicted_position_bound(est_position: Position3,
                             gains: NDArray[np.complex128],
                             scene: SceneConfig,
                             model_cov: NDArray[np.float64],
                             j_prev_b: NDArray[np.float64]) -> float:
    """Trace of the predicted position bound for the upcoming slot."""
    params = ParamVector.from_gains(est_position, gains)
    j = fim_single_slot(params, scene, scene.noise_power_w)
    j_b = bfim_step(j_prev_b, j, model_cov)
    return float(np.sum(position_bcrb(j_b)))


def _gain_sensitivity(est_position, gains, scene, model_cov, j_prev_b, i: int) -> complex:
    """d(bound)/d(Re gain_i) + j d(bound)/d(Im gain_i), central differences.

    The step scales with the gain magnitude since equivalent gains span
    many decades over a power sweep.
    """
    h = 1e-5 * max(abs(gains[i]), 1e-9)
    out = np.zeros(2)
    for axis, delta in ((0, h), (1, 1j * h)):
        gp = gains.copy()
        gp[i] += delta
        fp = predicted_position_bound(est_position, gp, scene, model_cov, j_prev_b)
        gm = gains.copy()
        gm[i] -= delta
        fm = predicted_position_bound(est_position, gm, scene, model_cov, j_prev_b)
        out[axis] = (fp - fm) / (2.0 * h)
    return complex(out[0], out[1])


def optimize_p2_weights(predictors, est_position: Position3, scene: SceneConfig,
                        model_cov, j_prev_b,
                        max_iter: int = 100) -> NDArray[np.complex128]:
    """Lobe weights of the directional BS beam minimizing the bound.

    Plain projected gradient descent over the K complex weights (central
    differences, step 1e-5, beam renormalized inside the objective),
    backtracking line search, best iterate returned.
    """
    k = len(predictors)
    phases = np.stack([directional_pbf(pr.aod_ris, pr.aoa_ris, scene.n_ris)
                       for pr in predictors])

    def objective(w):
        plan = BeamPlan(phases, directional_bs_beam(w, scene))
        gains = predict_gains(predictors, plan, scene)
        return predicted_position_bound(est_position, gains, scene, model_cov, j_prev_b)

    w = np.full(k, 1.0 / np.sqrt(k), dtype=complex)
    best_w, best_f = w.copy(), objective(w)
    f0 = best_f
    step = 0.1
    h = 1e-5
    for _ in range(max_iter):
        grad = np.zeros(k, complex)
        for i in range(k):
            for delta, part in ((h, 1.0), (1j * h, 1j)):
                wp = w.copy(); wp[i] += delta
                wm = w.copy(); wm[i] -= delta
                grad[i] += part * (objective(wp) - objective(wm)) / (2.0 * h)
        gn = np.linalg.norm(grad)
        if gn < 1e-14:
            break
        moved = False
        while step > 1e-8:
            trial = w - step * grad / gn
            if np.linalg.norm(trial) < 1e-9:
                step *= 0.5
                continue
            ft = objective(trial)
            if ft < f0:
                w, f0, moved = trial, ft, True
                break
            step *= 0.5
        if not moved:
            break
        improvement = best_f - f0
        if f0 < best_f:
            best_w, best_f = w.copy(), f0
        step = min(step * 2.0, 0.1)
        if improvement < 1e-9 * max(best_f, 1e-30):
            break
    return best_w


def optimize_p1_agdm(predictors, est_position: Position3, scene: SceneConfig,
                     model_cov, j_prev_b, init: BeamPlan,
                     max_outer: int = 100, tol: float = 1e-6) -> BeamPlan:
    """Joint plan refinement by alternating projected gradient descent.

    Per outer iteration every RIS phase block is updated along the chained
    bound gradient and re-projected to unit modulus, then the BS beam is
    updated and renormalized.  Stops when the relative objective change
    falls below `tol` or after `max_outer` iterations; the best feasible
    iterate is returned.
    """
    k = len(predictors)
    omega = init.ris_phases.copy()
    f = init.bs_beam.copy()
    theta_in = scene.ris_aoa_from_bs()
    psi_bs = scene.bs_aod()
    a_bs = np.stack([steering(float(psi_bs[i]), scene.n_bs) for i in range(k)])
    # v_i^T omega_i reproduces the RIS factor of the equivalent gain
    v = np.stack([np.conj(steering(pr.aod_ris, scene.n_ris))
                  * steering(float(theta_in[i]), scene.n_ris)
                  for i, pr in enumerate(predictors)])
    rho_ub = np.array([pr.rho_ub for pr in predictors])

    def gains_of(om, beam):
        return rho_ub * (v * om).sum(axis=1) * (a_bs.conj() @ beam)

    def objective(om, beam):
        return predicted_position_bound(est_position, gains_of(om, beam),
                                        scene, model_cov, j_prev_b)

    f_cur = objective(omega, f)
    best = (omega.copy(), f.copy(), f_cur)
    step_om = np.full(k, 0.5)
    step_f = 0.5
    for _ in range(max_outer):
        f_prev_outer = f_cur
        for i in range(k):
            gains = gains_of(omega, f)
            w_i = _gain_sensitivity(est_position, gains, scene, model_cov,
                                    j_prev_b, i)
            c_i = rho_ub[i] * np.vdot(a_bs[i], f)
            grad = w_i * np.conj(c_i) * np.conj(v[i])
            gn = np.linalg.norm(grad)
            if gn < 1e-30:
                continue
            while step_om[i] > 1e-6:
                cand = omega[i] - step_om[i] * np.sqrt(scene.n_ris) * grad / gn
                mags = np.abs(cand)
                if mags.min() < 1e-12:
                    step_om[i] *= 0.5
                    continue
                cand = cand / mags
                om_t = omega.copy()
                om_t[i] = cand
                ft = objective(om_t, f)
                if ft < f_cur:
                    omega, f_cur = om_t, ft
                    step_om[i] = min(step_om[i] * 2.0, 0.5)
                    break
                step_om[i] *= 0.5
        gains = gains_of(omega, f)
        grad_f = np.zeros(scene.n_bs, complex)
        for i in range(k):
            w_i = _gain_sensitivity(est_position, gains, scene, model_cov,
                                    j_prev_b, i)
            b_i = rho_ub[i] * (v[i] @ omega[i])
            grad_f += w_i * np.conj(b_i) * a_bs[i]
        gn = np.linalg.norm(grad_f)
        if gn > 1e-30:
            while step_f > 1e-6:
                cand = f - step_f * grad_f / gn
                nrm = np.linalg.norm(cand)
                if nrm < 1e-12:
                    step_f *= 0.5
                    continue
                ft = objective(omega, cand / nrm)
                if ft < f_cur:
                    f, f_cur = cand / nrm, ft
                    step_f = min(step_f * 2.0, 0.5)
                    break
                step_f *= 0.5
        if f_cur < best[2]:
            best = (omega.copy(), f.copy(), f_cur)
        if abs(f_prev_outer - f_cur) < tol * max(abs(f_prev_outer), 1e-30):
            break
    return BeamPlan(best[0], best[1])


def random_plan(scene: SceneConfig, rng: np.random.Generator) -> BeamPlan:
    """Uniform random phases per RIS, isotropic random BS beam."""
    phases = np.exp(2j * np.pi * rng.uniform(size=(scene.n_paths, scene.n_ris)))
    beam = rng.standard_normal(scene.n_bs) + 1j * rng.standard_normal(scene.n_bs)
    return BeamPlan(phases, beam)
