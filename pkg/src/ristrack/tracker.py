"""Position tracking by Gaussian/Von Mises message passing.

One slot alternates between the angular estimator (which returns Von Mises
posteriors per path) and a Gaussian belief over the user position.  The
angle-to-position direction approximates the product of Von Mises cone
constraints by a Gaussian at its local maximum (gradient ascent, exact
Hessian); the position-to-angle direction projects the Gaussian onto each
path's direction cosine.  Cavity messages keep the per-path extrinsic
information separated, and the first slot can resolve the path-to-RIS
association by exhaustive permutation search.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import aoa as aoa_mod
from .aoa import KAPPA_CAP, AoaPosterior, VonMisesMsg, vm_extrinsic, vm_multiply
from .geometry import Position3, as_position
from .signal import SceneConfig, _as_cov

__all__ = [
    "GaussianMsg",
    "TrackerConfig",
    "TrackerState",
    "SlotEstimate",
    "markov_predict",
    "gaussian_fuse",
    "likelihood_product_gaussian",
    "cavity_product",
    "position_to_angle_vm",
    "run_slot",
    "init_matching",
    "init_state",
]

_FLAT_TRACE = 1e3   # prior covariance trace above this counts as "no prior"

# Assignments whose Laplace evidence trails the best by more than this many
# nats carry posterior odds below ~1e-6 and are excluded from the trace
# comparison in init_matching.
_EVIDENCE_MARGIN = 14.0


@dataclass(frozen=True)
class GaussianMsg:
    """Gaussian message over the user position."""

    mean: Position3
    cov: NDArray[np.float64]
    flags: tuple = ()

    def __post_init__(self):
        mean = as_position(self.mean)
        cov = np.asarray(self.cov, dtype=float).reshape(3, 3)
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass
class TrackerConfig:
    """Knobs of the per-slot message-passing loop."""

    model_cov: NDArray[np.float64]          # C_q assumed by the tracker
    damping: float = 0.5                    # on the position->factor messages
    gdm_step: float = 1e-2                  # ascent step length, m
    gdm_max_iter: int = 200
    gdm_grad_tol: float = 1e-6
    inner_max_iter: int = 15
    inner_tol: float = 1e-4                 # position-mean change, m
    initial_prior: GaussianMsg | None = None  # None = flat (mean 0, cov 1e4 I)
    hessian_floor: float = 1e-6             # eigenvalue floor on -H, 1/m^2
    cov_floor: float = 1e-12
    matching_grid_pitch: float = 2.0        # coarse search pitch with flat prior, m

    def __post_init__(self):
        self.model_cov = _as_cov(self.model_cov)
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.initial_prior is None:
            self.initial_prior = GaussianMsg(np.zeros(3), 1e4 * np.eye(3))


@dataclass
class SlotEstimate:
    """Per-slot output of the tracker."""

    position: Position3
    cov: NDArray[np.float64]
    aoa_means: NDArray[np.float64]        # posterior cosines, RIS order
    gains: NDArray[np.complex128]
    flags: tuple = ()
    iterations: int = 0


@dataclass
class TrackerState:
    """Mutable carry between slots of one trajectory."""

    forward: GaussianMsg
    extrinsics: list = field(default_factory=list)   # angle->position VM messages
    priors: list = field(default_factory=list)       # position->angle VM messages
    cavities: list = field(default_factory=list)
    matching: tuple = ()
    aoa_hyper: AoaPosterior | None = None
    slot_index: int = 0


def init_state(config: TrackerConfig) -> TrackerState:
    return TrackerState(forward=config.initial_prior)


def markov_predict(prev: GaussianMsg, model_cov: NDArray[np.float64]) -> GaussianMsg:
    """Push a position belief through one mobility step."""
    return GaussianMsg(prev.mean, prev.cov + np.asarray(model_cov, float), prev.flags)


def gaussian_fuse(a: GaussianMsg, b: GaussianMsg) -> GaussianMsg:
    """Product of two Gaussian messages (precisions add)."""
    try:
        lam_a = np.linalg.inv(a.cov)
        lam_b = np.linalg.inv(b.cov)
        lam = lam_a + lam_b
        cov = np.linalg.inv(lam)
    except np.linalg.LinAlgError as e:
        raise ValueError("singular covariance in fuse") from e
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (lam_a @ a.mean + lam_b @ b.mean)
    return GaussianMsg(mean, cov, a.flags + b.flags)


# ---------------------------------------------------------------------------
# Gaussian approximation of a product of Von Mises cone constraints.

def _terms(vm_msgs, scene: SceneConfig):
    """Split (message, ris index) pairs into plain arrays, dropping flat ones."""
    mus, kappas, anchors = [], [], []
    for msg, idx in vm_msgs:
        if msg.kappa <= 0.0:
            continue
        mus.append(msg.mu)
        kappas.append(msg.kappa)
        anchors.append(scene.ris_positions[idx])
    if not kappas:
        raise ValueError("no information in the angle messages")
    return np.array(mus), np.array(kappas), np.array(anchors)


def _eval(p, mus, kappas, anchors, e_u, order=0, quad=None):
    """Log-density of the constraint product and optional derivatives.

    order 0: value; 1: (value, gradient); 2: (value, gradient, Hessian).
    quad, when given, is a (mean, precision) pair adding the log-density of
    a Gaussian factor to the objective.
    """
    diff = anchors - p                       # (J, 3), user -> anchor
    d = np.linalg.norm(diff, axis=1)
    e = diff / d[:, None]
    theta = e @ e_u
    delta = np.pi * theta - mus
    cosd = np.cos(delta)
    f = float(kappas @ cosd)
    if quad is not None:
        dev = p - quad[0]
        f -= 0.5 * float(dev @ quad[1] @ dev)
    if order == 0:
        return f
    sind = np.sin(delta)
    u = (-e_u[None, :] + theta[:, None] * e) / d[:, None]
    grad = -np.pi * (kappas * sind) @ u
    if quad is not None:
        grad = grad - quad[1] @ dev
    if order == 1:
        return f, grad
    # d(u)/dp; the cross terms with e_u are required for the exact value
    cross = e_u[None, None, :] * e[:, :, None] + e_u[None, :, None] * e[:, None, :]
    ee = e[:, :, None] * e[:, None, :]
    du = (-cross + 3.0 * theta[:, None, None] * ee
          - theta[:, None, None] * np.eye(3)[None]) / (d**2)[:, None, None]
    uu = u[:, :, None] * u[:, None, :]
    hess = -(np.pi**2 * kappas * cosd) @ uu.reshape(len(kappas), 9) \
        - (np.pi * kappas * sind) @ du.reshape(len(kappas), 9)
    hess = hess.reshape(3, 3)
    if quad is not None:
        hess = hess - quad[1]
    return f, grad, hess


def _ascend(start, mus, kappas, anchors, e_u, config: TrackerConfig, quad=None):
    """Gradient ascent with backtracking halving; optional Newton tail.

    A guarded Newton phase runs first: in warm-started tracking the start
    sits inside the concave basin of the optimum and a few Newton steps
    finish the job.  Any indefinite Hessian or non-improving step falls
    back to the gradient phase, which carries cold starts.
    """
    p = np.array(start, float)
    converged = False
    slack = None
    for _ in range(30):
        f0, g, h = _eval(p, mus, kappas, anchors, e_u, order=2, quad=quad)
        if np.linalg.norm(g) < config.gdm_grad_tol:
            converged = True
            break
        w, v = np.linalg.eigh(-h)
        if w.min() <= 0:
            break
        step = v @ ((v.T @ g) / w)
        norm = np.linalg.norm(step)
        if norm > 1.0:
            step *= 1.0 / norm
        ft = _eval(p + step, mus, kappas, anchors, e_u, quad=quad)
        if ft < f0 - 1e-12 * (1.0 + abs(f0)):
            break
        p = p + step
        if norm < 1e-9:
            converged = True
            break
    lam = config.gdm_step
    if not converged:
        for _ in range(config.gdm_max_iter):
            f0, g = _eval(p, mus, kappas, anchors, e_u, order=1, quad=quad)
            ng = np.linalg.norm(g)
            if ng < config.gdm_grad_tol:
                converged = True
                break
            direction = g / ng
            cand = None
            while lam > 1e-9:
                trial = p + lam * direction
                ft = _eval(trial, mus, kappas, anchors, e_u, quad=quad)
                if ft > f0:
                    cand = (trial, ft)
                    break
                lam *= 0.5
            if cand is None or lam < 1e-8:
                break
            p, f0 = cand
            lam = min(2.0 * lam, config.gdm_step)
    if not converged:
        # tail polish: guarded Newton on the same basin.  Near the top the
        # objective change falls below float resolution, so accept any step
        # that does not measurably descend.
        for _ in range(8):
            f0, g, h = _eval(p, mus, kappas, anchors, e_u, order=2, quad=quad)
            if np.linalg.norm(g) < config.gdm_grad_tol:
                converged = True
                break
            w, v = np.linalg.eigh(-h)
            if w.min() <= 0:
                break
            step = v @ ((v.T @ g) / w)
            norm = np.linalg.norm(step)
            if norm > 1.0:
                step *= 1.0 / norm
            ft = _eval(p + step, mus, kappas, anchors, e_u, quad=quad)
            if ft < f0 - 1e-12 * (1.0 + abs(f0)):
                break
            p = p + step
        converged = converged or np.linalg.norm(
            _eval(p, mus, kappas, anchors, e_u, order=1,
                  quad=quad)[1]) < config.gdm_grad_tol
    return p, converged


def likelihood_product_gaussian(vm_msgs, start: Position3, config: TrackerConfig,
                                scene: SceneConfig) -> GaussianMsg:
    """Gaussian fit to a product of per-path Von Mises cone constraints.

    Parameters
    ----------
    vm_msgs : iterable of (VonMisesMsg, int)
        Angle messages over pi*theta and the RIS index each refers to.
        Uniform (kappa = 0) entries carry no constraint and are skipped.
    start : (3,) array
        Ascent start, usually the current position belief mean.

    Returns
    -------
    GaussianMsg at the local maximizer, covariance the inverse negative
    Hessian.  Degeneracies are flagged, never raised: `hessian_floor` when
    an eigenvalue of -H had to be lifted, `gdm_no_convergence` when the
    iteration budget ran out first.
    """
    mus, kappas, anchors = _terms(vm_msgs, scene)
    e_u = scene.user_direction
    p, converged = _ascend(as_position(start), mus, kappas, anchors, e_u, config)
    flags = () if converged else ("gdm_no_convergence",)
    _, _, hess = _eval(p, mus, kappas, anchors, e_u, order=2)
    neg = -0.5 * (hess + hess.T)
    w, v = np.linalg.eigh(neg)
    if w.min() < config.hessian_floor:
        w = np.maximum(w, config.hessian_floor)
        flags = flags + ("hessian_floor",)
    cov = (v / w) @ v.T
    return GaussianMsg(p, 0.5 * (cov + cov.T), flags)


def cavity_product(vm_msgs, exclude: int, start: Position3, config: TrackerConfig,
                   scene: SceneConfig) -> GaussianMsg:
    """Same Gaussian fit with the messages of one RIS left out."""
    kept = [(m, i) for m, i in vm_msgs if i != exclude]
    return likelihood_product_gaussian(kept, start, config, scene)


def position_to_angle_vm(msg: GaussianMsg, ris_position: Position3,
                         e_u: NDArray[np.float64]) -> VonMisesMsg:
    """Von Mises fit of the direction-cosine pushforward of a position belief.

    The mean direction is pi times the cosine at the belief mean; the
    concentration follows from projecting the positional spread onto the
    in-plane direction perpendicular to the line of sight.  Near endfire
    (|cosine| -> 1) or when the line of sight runs along the array axis the
    formula degenerates; the result is then computed with a clamped cosine
    and flagged.
    """
    flags = ()
    diff = np.asarray(ris_position, float) - msg.mean
    d = float(np.linalg.norm(diff))
    if d < 1.0:
        flags += ("near_field",)
    theta = float(np.clip(diff @ e_u / d, -1.0, 1.0))
    t2 = theta * theta
    limit = (1.0 - 1e-6) ** 2
    if t2 > limit:
        t2 = limit
        flags += ("endfire",)
    w_vec = -diff                            # anchor -> mean, sign irrelevant below
    cr = np.cross(w_vec, e_u)
    if np.linalg.norm(cr) < 1e-9 * d:
        flags += ("endfire",)
        # any direction orthogonal to the line of sight will do
        basis = np.eye(3)[np.argmin(np.abs(w_vec))]
        v = basis - (basis @ w_vec) * w_vec / (d * d)
        v /= np.linalg.norm(v)
    else:
        v = np.cross(cr, w_vec)
        v /= np.linalg.norm(v)
    var = float(v @ msg.cov @ v)
    if var <= 0:
        var = 1e-12
        flags += ("degenerate_cov",)
    kappa = min(d * d / (np.pi**2 * (1.0 - t2) * var), KAPPA_CAP)
    return VonMisesMsg(np.pi * theta, kappa, flags)


# ---------------------------------------------------------------------------
# Per-slot loop.

def _damp(prev: GaussianMsg | None, cand: GaussianMsg, beta: float) -> GaussianMsg:
    """Exponential smoothing in information form."""
    if prev is None or beta >= 1.0:
        return cand
    lam_p = np.linalg.inv(prev.cov)
    lam_c = np.linalg.inv(cand.cov)
    lam = beta * lam_c + (1.0 - beta) * lam_p
    h = beta * (lam_c @ cand.mean) + (1.0 - beta) * (lam_p @ prev.mean)
    cov = np.linalg.inv(lam)
    cov = 0.5 * (cov + cov.T)
    return GaussianMsg(cov @ h, cov, cand.flags)


def _coarse_start(mus, kappas, anchors, e_u, scene: SceneConfig, pitch: float):
    """Best point of a coarse cuboid scan; ascent start when no prior exists."""
    axes = [np.arange(scene.bounds[k, 0], scene.bounds[k, 1] + pitch / 2, pitch)
            for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    diff = anchors[None, :, :] - pts[:, None, :]
    d = np.linalg.norm(diff, axis=2)
    theta = (diff @ e_u) / d
    vals = np.cos(np.pi * theta - mus) @ kappas
    return pts[int(np.argmax(vals))]


def _flat_priors(k: int) -> list:
    return [VonMisesMsg(0.0, 0.0) for _ in range(k)]


def init_matching(posteriors, prior: GaussianMsg, config: TrackerConfig,
                  scene: SceneConfig) -> tuple:
    """Assign unordered first-slot angle posteriors to RIS factor nodes.

    Every assignment gets a Laplace fit of the angle-constraint product
    times the Gaussian prior (ascent to the joint maximum, curvature
    there).  Assignments whose Laplace evidence trails the best by more
    than _EVIDENCE_MARGIN nats are discarded — their posterior odds are
    negligible, which is how decisively wrong pairings are rejected even
    when an off-cone compromise point happens to curve sharply.  Among
    the surviving, genuinely plausible assignments the covariance trace
    of the fused belief decides, returned as a tuple `perm` with
    perm[source] = ris index.  Ties (within 1e-12) break toward the
    lexicographically smallest permutation.
    """
    k = len(posteriors)
    if k > 9:
        raise ValueError("exhaustive matching infeasible for K > 9")
    flat_prior = float(np.trace(prior.cov)) > _FLAT_TRACE
    prior_mean = as_position(prior.mean)
    quad = (prior_mean, np.linalg.inv(prior.cov))
    scored = []
    for perm in itertools.permutations(range(k)):
        pairs = [(posteriors[j], perm[j]) for j in range(k)]
        mus, kappas, anchors = _terms(pairs, scene)
        start = (_coarse_start(mus, kappas, anchors, scene.user_direction, scene,
                               config.matching_grid_pitch)
                 if flat_prior else prior_mean)
        p, _ = _ascend(start, mus, kappas, anchors, scene.user_direction,
                       config, quad=quad)
        f_max, _, hess = _eval(p, mus, kappas, anchors, scene.user_direction,
                               order=2, quad=quad)
        neg = -0.5 * (hess + hess.T)
        w = np.maximum(np.linalg.eigvalsh(neg), config.hessian_floor)
        tr = float(np.sum(1.0 / w))
        evidence = f_max - 0.5 * float(np.sum(np.log(w)))
        scored.append((perm, tr, evidence))
    cutoff = max(ev for _, _, ev in scored) - _EVIDENCE_MARGIN
    best, best_tr = None, np.inf
    for perm, tr, ev in scored:
        if ev >= cutoff and tr < best_tr - 1e-12:
            best, best_tr = perm, tr
    return best


def run_slot(state: TrackerState, y, config: TrackerConfig,
             scene: SceneConfig) -> tuple[TrackerState, SlotEstimate]:
    """Advance the tracker by one slot given the received snapshot.

    Returns the updated state and the slot estimate.  Degeneracy flags from
    the message approximations propagate into the estimate; the slot always
    completes.
    """
    k = scene.n_paths
    prediction = markov_predict(state.forward, config.model_cov)
    flags: tuple = ()

    first = state.slot_index == 0
    matching = state.matching if state.matching else tuple(range(k))
    if first and float(np.trace(prediction.cov)) > _FLAT_TRACE:
        # no usable prior: estimate angles blind, then resolve the association
        post = aoa_mod.estimate(y, _flat_priors(k))
        perm = init_matching(post.modes, prediction, config, scene)
        order = np.argsort(perm)            # order[ris] = source index
        post = AoaPosterior(
            modes=[post.modes[j] for j in order],
            gain_mean=post.gain_mean[order],
            gain_var=post.gain_var[order],
            noise_var=post.noise_var,
            gain_prior_var=post.gain_prior_var,
            gain_cov=(post.gain_cov[np.ix_(order, order)]
                      if post.gain_cov is not None else None),
        )
        matching = perm
        priors = _flat_priors(k)
        extrinsics = list(post.modes)       # flat priors: extrinsic = posterior
        pairs = list(zip(extrinsics, range(k)))
        mus, kappas, anchors = _terms(pairs, scene)
        start = _coarse_start(mus, kappas, anchors, scene.user_direction, scene,
                              config.matching_grid_pitch)
        g_full = likelihood_product_gaussian(pairs, start, config, scene)
        flags += g_full.flags
        forward = gaussian_fuse(g_full, prediction)
        cavities = [cavity_product(pairs, i, forward.mean, config, scene)
                    for i in range(k)]
        iterations = 1
    else:
        cavities = [None] * k               # rebuilt within the slot
        damped: list = [None] * k
        post = state.aoa_hyper
        prev_mean = None
        forward = prediction
        priors = list(state.priors) if len(state.priors) == k else _flat_priors(k)
        extrinsics = list(state.extrinsics)
        iterations = 0
        for it in range(config.inner_max_iter):
            iterations = it + 1
            priors = []
            for i in range(k):
                if cavities[i] is None:
                    cand = prediction
                else:
                    cand = gaussian_fuse(cavities[i], prediction)
                damped[i] = _damp(damped[i], cand, config.damping)
                vm = position_to_angle_vm(damped[i], scene.ris_positions[i],
                                          scene.user_direction)
                flags += vm.flags
                priors.append(vm)
            post = aoa_mod.estimate(y, priors, init=post)
            extrinsics = [vm_extrinsic(post.modes[i], priors[i]) for i in range(k)]
            pairs = list(zip(extrinsics, range(k)))
            start = forward.mean
            g_full = likelihood_product_gaussian(pairs, start, config, scene)
            forward = gaussian_fuse(g_full, prediction)
            flags += g_full.flags
            if prev_mean is not None and np.linalg.norm(forward.mean - prev_mean) < config.inner_tol:
                break
            prev_mean = forward.mean
            for i in range(k):
                cavities[i] = cavity_product(pairs, i, forward.mean, config, scene)

    new_state = TrackerState(
        forward=forward,
        extrinsics=extrinsics,
        priors=priors,
        cavities=[c for c in cavities if c is not None],
        matching=matching,
        aoa_hyper=post,
        slot_index=state.slot_index + 1,
    )
    estimate_out = SlotEstimate(
        position=forward.mean,
        cov=forward.cov,
        aoa_means=np.array([m.mu / np.pi for m in post.modes]),
        gains=np.array(post.gain_mean, dtype=complex),
        flags=tuple(dict.fromkeys(flags)),
        iterations=iterations,
    )
    return new_state, estimate_out
