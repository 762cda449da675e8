"""Variational angle-of-arrival estimation with Von Mises posteriors.

Works in the wrapped per-element phase phi = pi * theta of each path, where
theta is the direction cosine at the user array.  Von Mises densities are
closed under multiplication, so every message is carried as a (mu, kappa)
pair and products/quotients reduce to sums/differences of kappa*e^{j*mu}.

The estimator is a fixed-model-order coordinate-ascent scheme: per-source
phase updates on a dense circular grid (moment-matched back to Von Mises),
a joint Gaussian update of the complex path gains using expected steering
vectors, and EM refreshes of the noise and gain-prior variances.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy.special import ive

__all__ = [
    "VonMisesMsg",
    "AoaPosterior",
    "wrap_angle",
    "vm_multiply",
    "vm_extrinsic",
    "vm_circular_moment",
    "expected_steering",
    "estimate",
    "fused_belief",
]

GRID_SIZE = 4096
KAPPA_CAP = 1e12          # keeps curvatures and Bessel arguments finite
_POLISH_KAPPA = 1e4       # above this the grid cannot resolve the posterior
_FLAT_KAPPA = 1.0         # priors below this count as uninformative


def wrap_angle(phi: float) -> float:
    """Wrap a phase into (-pi, pi]."""
    wrapped = float(np.remainder(phi, 2.0 * np.pi))
    if wrapped > np.pi:
        wrapped -= 2.0 * np.pi
    return wrapped


@dataclass(frozen=True)
class VonMisesMsg:
    """Von Mises message over a wrapped phase.

    kappa = 0 is the uniform circular distribution; mu is then only a
    label.  Instances are immutable values.
    """

    mu: float
    kappa: float
    flags: tuple = ()

    def __post_init__(self):
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError("kappa must be finite and nonnegative")
        object.__setattr__(self, "mu", wrap_angle(self.mu))


def vm_multiply(a: VonMisesMsg, b: VonMisesMsg) -> VonMisesMsg:
    """Product of two Von Mises factors, again Von Mises.

    In the complex representation the parameter vectors simply add.
    """
    z = a.kappa * np.exp(1j * a.mu) + b.kappa * np.exp(1j * b.mu)
    kappa = min(abs(z), KAPPA_CAP)
    mu = float(np.angle(z)) if kappa > 0 else a.mu
    return VonMisesMsg(mu, kappa)


def vm_extrinsic(posterior: VonMisesMsg, prior: VonMisesMsg) -> VonMisesMsg:
    """Divide a Von Mises posterior by a Von Mises prior factor.

    Complex parameters subtract.  When they cancel (below 1e-9 modulus) the
    result is the uniform distribution tagged with the posterior's mean.
    """
    z = posterior.kappa * np.exp(1j * posterior.mu) - prior.kappa * np.exp(1j * prior.mu)
    if abs(z) < 1e-9:
        return VonMisesMsg(posterior.mu, 0.0)
    return VonMisesMsg(float(np.angle(z)), min(abs(z), KAPPA_CAP))


def fused_belief(extrinsic: VonMisesMsg, prior: VonMisesMsg) -> VonMisesMsg:
    """Belief over one path's phase: extrinsic times incoming prior.

    The reported AoA estimate is mu / pi of this message.
    """
    return vm_multiply(extrinsic, prior)


def vm_circular_moment(msg: VonMisesMsg, order: int) -> complex:
    """E[e^{j*order*phi}] under the message: e^{j*order*mu} I_order/I_0.

    Uses exponentially scaled Bessel functions, stable for any kappa the
    cap allows.
    """
    if order < 0:
        raise ValueError("moment order must be nonnegative")
    if order == 0:
        return 1.0 + 0.0j
    if msg.kappa > _BESSEL_MAX:
        ratio = float(np.exp(-order**2 / (2.0 * msg.kappa)))
    else:
        ratio = float(ive(order, msg.kappa) / ive(0, msg.kappa))
    return complex(np.exp(1j * order * msg.mu) * ratio)


# scipy's scaled Bessel ive returns NaN for arguments beyond ~4e9; above
# this switch the wrapped-normal limit is accurate to O(1/kappa^2).
_BESSEL_MAX = 1e8


def _moment_ratios(kappa: float, n_elements: int) -> NDArray[np.float64]:
    """I_n(kappa)/I_0(kappa) for n = 0..n_elements-1."""
    orders = np.arange(n_elements)
    if kappa > _BESSEL_MAX:
        return np.exp(-orders**2 / (2.0 * kappa))
    return ive(orders, kappa) / ive(0, kappa)


def expected_steering(msg: VonMisesMsg, n_elements: int) -> NDArray[np.complex128]:
    """Expected steering vector E[a(phi)] under a Von Mises phase posterior."""
    n = np.arange(n_elements)
    return np.exp(1j * n * msg.mu) * _moment_ratios(msg.kappa, n_elements)


@lru_cache(maxsize=8)
def _grid(n_elements: int, grid_size: int):
    """Uniform circular grid over (-pi, pi] and its steering matrix."""
    phi = -np.pi + 2.0 * np.pi * (np.arange(grid_size) + 1.0) / grid_size
    a = np.exp(1j * np.outer(phi, np.arange(n_elements)))
    return phi, a, np.exp(1j * phi)


def _inv_bessel_ratio(r: float) -> float:
    """Invert I_1/I_0; rational seed plus Newton refinement."""
    if r <= 1e-12:
        return 0.0
    if r >= 1.0 - 1e-12:
        return KAPPA_CAP
    if r < 0.53:
        k = 2.0 * r + r**3 + 5.0 * r**5 / 6.0
    elif r < 0.85:
        k = -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    else:
        k = 1.0 / (r**3 - 4.0 * r**2 + 3.0 * r)
    for _ in range(25):
        if k > _BESSEL_MAX:
            # asymptotic regime; R = 1 - 1/(2k) is already exact enough there
            k = min(0.5 / (1.0 - r), KAPPA_CAP)
            break
        a = float(ive(1, k) / ive(0, k))
        slope = 1.0 - a * a - a / k
        if slope <= 0.0:
            break
        step = (a - r) / slope
        k = max(k - step, 1e-12)
        if abs(step) < 1e-12 * max(k, 1.0):
            break
    return min(k, KAPPA_CAP)


@dataclass
class AoaPosterior:
    """Output of :func:`estimate`: per-path phase and gain posteriors."""

    modes: list                           # VonMisesMsg per path, over pi*theta
    gain_mean: NDArray[np.complex128]     # (K,)
    gain_var: NDArray[np.float64]         # diagonal of the gain covariance
    noise_var: float
    gain_prior_var: float
    gain_cov: NDArray[np.complex128] | None = None


def _polish(c: NDArray[np.complex128], prior: VonMisesMsg, phi0: float,
            grid_step: float) -> tuple[float, float] | None:
    """Newton refinement of the continuous log-posterior mode.

    c holds the conjugated linear coefficients, so the objective is
    L(phi) = kappa_p cos(phi - mu_p) + Re sum_n c_n e^{j n phi}.  Returns
    (mode, curvature-fit kappa), or None when no proper maximum is found.
    """
    n = np.arange(c.size)
    n2 = n * n
    phi = phi0
    d2 = 0.0
    for _ in range(40):
        z = c * np.exp(1j * n * phi)
        d1 = -prior.kappa * np.sin(phi - prior.mu) - float(n @ z.imag)
        d2 = -prior.kappa * np.cos(phi - prior.mu) - float(n2 @ z.real)
        if d2 >= 0.0:
            return None
        step = np.clip(-d1 / d2, -2.0 * grid_step, 2.0 * grid_step)
        phi += step
        if abs(step) < 1e-15:
            break
    kappa = min(max(-d2, 0.0), KAPPA_CAP)
    return wrap_angle(phi), kappa


def estimate(y: NDArray[np.complex128],
             priors: list,
             init: AoaPosterior | None = None,
             *,
             grid_size: int = GRID_SIZE,
             max_iter: int = 50,
             tol: float = 1e-5) -> AoaPosterior:
    """Joint posterior over K path phases and gains from one snapshot.

    Parameters
    ----------
    y : (N,) complex
        Received snapshot at the user array.
    priors : list of VonMisesMsg
        One incoming phase prior per path, indexed like the RIS list the
        caller tracks.  kappa = 0 entries are uninformative.
    init : AoaPosterior, optional
        Warm start (previous call on the same path set).  Also seeds the
        noise and gain-prior variances instead of the data-driven guess.

    Returns
    -------
    AoaPosterior with the model order fixed at len(priors).
    """
    y = np.asarray(y, dtype=complex)
    if not np.all(np.isfinite(y)):
        raise ValueError("received signal contains non-finite entries")
    n_el = y.size
    K = len(priors)
    if K < 1:
        raise ValueError("need at least one path")
    phi_grid, a_grid, e_grid = _grid(n_el, grid_size)
    grid_step = 2.0 * np.pi / grid_size
    power = float(np.vdot(y, y).real) / n_el

    if init is not None:
        modes = list(init.modes)
        rho = np.array(init.gain_mean, dtype=complex)
        sigma = (np.array(init.gain_cov, dtype=complex) if init.gain_cov is not None
                 else np.diag(init.gain_var).astype(complex))
        noise_var = float(init.noise_var)
        prior_var = float(init.gain_prior_var)
    else:
        modes = [None] * K
        rho = np.zeros(K, dtype=complex)
        sigma = np.zeros((K, K), dtype=complex)
        informative = sorted((i for i in range(K) if priors[i].kappa > _FLAT_KAPPA),
                             key=lambda i: -priors[i].kappa)
        flat = [i for i in range(K) if priors[i].kappa <= _FLAT_KAPPA]
        resid = y.copy()
        for i in informative:
            modes[i] = VonMisesMsg(priors[i].mu, priors[i].kappa)
            a = expected_steering(modes[i], n_el)
            rho[i] = np.vdot(a, resid) / n_el
            resid = resid - rho[i] * a
        for i in flat:
            # matching-pursuit seed: strongest remaining periodogram peak.
            # The seed concentration must keep the expected steering vector
            # nearly undamped, or the subtraction leaves the source behind
            # and later seeds pile onto it.
            spectrum = np.abs(a_grid.conj() @ resid)
            g = int(np.argmax(spectrum))
            modes[i] = VonMisesMsg(float(phi_grid[g]), 1e4)
            a = expected_steering(modes[i], n_el)
            rho[i] = np.vdot(a, resid) / n_el
            resid = resid - rho[i] * a
        # Seed the variances from the fit itself.  A noise guess far above
        # the true floor flattens the weak sources' conditionals on the
        # first sweep and the loop settles with them absorbed into noise.
        resid_power = float(np.vdot(resid, resid).real)
        noise_var = max(resid_power / n_el, 1e-16 * power, 1e-30)
        prior_var = max(float(np.mean(np.abs(rho) ** 2)), 1e-16 * power, 1e-30)

    a_hat = np.column_stack([expected_steering(m, n_el) for m in modes])

    # Re-activation: a converged fit can strand a free mode as a duplicate
    # of a strong path (or shrunk to nothing) while a weak path sits
    # unmodeled in the residual.  Modes without an informative prior may
    # be re-seeded on the residual peak and iterated again.
    reseedable = [i for i in range(K) if priors[i].kappa <= _FLAT_KAPPA]
    max_restarts = 2 if reseedable else 0
    half_beam = np.pi / n_el

    for restart in range(max_restarts + 1):
        for _ in range(max_iter):
            mu_prev = np.array([m.mu for m in modes])

            # (i) per-source phase updates given the others' moments
            for i in range(K):
                weights = np.conj(rho[i]) * rho + sigma[:, i]
                weights[i] = 0.0
                lin = np.conj(rho[i]) * y - a_hat @ weights
                eta = (2.0 / noise_var) * lin
                c = np.conj(eta)
                ln_q = (a_grid @ c).real + priors[i].kappa * np.cos(phi_grid - priors[i].mu)
                ln_q -= ln_q.max()
                w = np.exp(ln_q)
                m1 = (w @ e_grid) / w.sum()
                kappa = _inv_bessel_ratio(abs(m1))
                mu = float(np.angle(m1))
                if kappa > _POLISH_KAPPA or priors[i].kappa > _POLISH_KAPPA:
                    refined = _polish(c, priors[i], float(phi_grid[int(np.argmax(ln_q))]),
                                      grid_step)
                    if refined is not None:
                        mu, kappa = refined
                modes[i] = VonMisesMsg(mu, kappa)
                a_hat[:, i] = expected_steering(modes[i], n_el)

            # dedup: two free modes inside half a beamwidth make the gain
            # system singular and their gains explode as a canceling pair,
            # which then drags every other update into their misfit.  The
            # weaker twin moves to the strongest residual peak right away.
            order = sorted(range(K), key=lambda j: (priors[j].kappa <= _FLAT_KAPPA,
                                                    -abs(rho[j])))
            kept: list = []
            for i in order:
                free = priors[i].kappa <= _FLAT_KAPPA
                if free and any(abs(wrap_angle(modes[i].mu - modes[j].mu)) < half_beam
                                for j in kept):
                    resid_now = y - a_hat @ rho
                    g = int(np.argmax(np.abs(a_grid.conj() @ resid_now)))
                    modes[i] = VonMisesMsg(float(phi_grid[g]), 1e4)
                    a_hat[:, i] = expected_steering(modes[i], n_el)
                    rho[i] = np.vdot(a_hat[:, i], resid_now) / n_el
                kept.append(i)

            # (ii) joint Gaussian gain posterior
            gram = a_hat.conj().T @ a_hat
            np.fill_diagonal(gram, n_el)
            ridge = max(noise_var / prior_var, 1e-10 * n_el)
            w_mat = gram + ridge * np.eye(K)
            rhs = a_hat.conj().T @ y
            rho = np.linalg.solve(w_mat, rhs)
            sigma = noise_var * np.linalg.inv(w_mat)
            sigma = 0.5 * (sigma + sigma.conj().T)

            # (iii) EM refresh of the variances
            p_mat = np.outer(rho, rho.conj()) + sigma
            resid_power = (float(np.vdot(y, y).real)
                           - 2.0 * float(np.vdot(y, a_hat @ rho).real)
                           + float(np.trace(gram @ p_mat).real))
            noise_var = max(resid_power / n_el, 1e-16 * power, 1e-30)
            prior_var = max(float(np.mean(np.abs(rho) ** 2 + np.diag(sigma).real)), 1e-30)

            delta = np.abs(np.angle(np.exp(1j * (np.array([m.mu for m in modes]) - mu_prev))))
            if delta.max() < tol:
                break

        if restart == max_restarts:
            break
        keep: list = []
        dead: list = []
        for i in sorted(range(K), key=lambda j: -abs(rho[j])):
            dup = any(abs(wrap_angle(modes[i].mu - modes[j].mu)) < half_beam
                      for j in keep)
            weak = 2.0 * n_el * abs(rho[i]) ** 2 / noise_var < 10.0
            if i in reseedable and (dup or weak):
                dead.append(i)
            else:
                keep.append(i)
        if not dead:
            break
        resid = y - a_hat @ rho
        for i in dead:
            g = int(np.argmax(np.abs(a_grid.conj() @ resid)))
            modes[i] = VonMisesMsg(float(phi_grid[g]), 1e4)
            a = expected_steering(modes[i], n_el)
            rho[i] = np.vdot(a, resid) / n_el
            resid = resid - rho[i] * a
            a_hat[:, i] = a

    return AoaPosterior(
        modes=modes,
        gain_mean=rho,
        gain_var=np.diag(sigma).real.copy(),
        noise_var=float(noise_var),
        gain_prior_var=float(prior_var),
        gain_cov=sigma,
    )
