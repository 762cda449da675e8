"""Fisher information and Bayesian bounds for the tracking problem.

Per slot the deterministic unknowns are the user position plus the phase
and magnitude of each path gain, stacked as [p; angle(rho); |rho|] of
length 2K+3.  The observation is a complex Gaussian snapshot whose mean is
the gain-weighted sum of user-side steering vectors, so the information
matrix follows from the real/imaginary mean derivatives.  A Markov prior
on the position folds in recursively; the gains carry no memory.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from .geometry import Position3, aoa_gradient, as_position
from .signal import SceneConfig

__all__ = [
    "ParamVector",
    "FimMatrix",
    "fim_single_slot",
    "initial_bfim",
    "bfim_step",
    "position_bcrb",
    "aoa_bound",
]

FimMatrix = NDArray[np.float64]   # (2K+3, 2K+3) symmetric PSD


@dataclass
class ParamVector:
    """Deterministic unknowns of one slot, order [p; angle(rho); |rho|]."""

    position: Position3
    gain_phases: NDArray[np.float64]
    gain_mags: NDArray[np.float64]

    def __post_init__(self):
        self.position = as_position(self.position)
        self.gain_phases = np.atleast_1d(np.asarray(self.gain_phases, float))
        self.gain_mags = np.atleast_1d(np.asarray(self.gain_mags, float))
        if self.gain_phases.shape != self.gain_mags.shape:
            raise ValueError("phase and magnitude vectors must match")
        if np.any(self.gain_mags < 0):
            raise ValueError("gain magnitudes must be nonnegative")

    @classmethod
    def from_gains(cls, position: Position3, gains: NDArray[np.complex128]) -> "ParamVector":
        gains = np.atleast_1d(np.asarray(gains, complex))
        return cls(position, np.angle(gains), np.abs(gains))

    @property
    def n_paths(self) -> int:
        return self.gain_mags.size

    def flatten(self) -> NDArray[np.float64]:
        return np.concatenate([self.position, self.gain_phases, self.gain_mags])


def fim_single_slot(params: ParamVector, scene: SceneConfig, noise_var: float) -> FimMatrix:
    """Single-slot Fisher information of [p; angle(rho); |rho|].

    J = (2 / sigma_n^2) (D_R^T D_R + D_I^T D_I) where D_R, D_I hold the
    partials of the real and imaginary snapshot means over the array
    elements.  Position enters through the chain rule over the K direction
    cosines.
    """
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    k = params.n_paths
    n = np.arange(scene.n_user, dtype=float)
    p = params.position
    thetas = scene.user_aoas(p)
    grads = np.array([aoa_gradient(scene.ris_positions[i], p, scene.user_direction)
                      for i in range(k)])
    psi = np.pi * np.outer(n, thetas) + params.gain_phases      # (N, K)
    cosp, sinp = np.cos(psi), np.sin(psi)
    mags = params.gain_mags
    d_r = np.zeros((scene.n_user, 2 * k + 3))
    d_i = np.zeros((scene.n_user, 2 * k + 3))
    # via the cosines: d mu_n / d theta_i, then chained onto position
    dtheta_r = -mags * np.pi * n[:, None] * sinp                # (N, K)
    dtheta_i = mags * np.pi * n[:, None] * cosp
    d_r[:, :3] = dtheta_r @ grads
    d_i[:, :3] = dtheta_i @ grads
    d_r[:, 3:3 + k] = -mags * sinp
    d_i[:, 3:3 + k] = mags * cosp
    d_r[:, 3 + k:] = cosp
    d_i[:, 3 + k:] = sinp
    j = (2.0 / noise_var) * (d_r.T @ d_r + d_i.T @ d_i)
    return 0.5 * (j + j.T)


def initial_bfim(prior_cov: NDArray[np.float64], n_paths: int) -> FimMatrix:
    """Recursion seed: position prior information, nothing on the gains."""
    dim = 2 * n_paths + 3
    j = np.zeros((dim, dim))
    j[:3, :3] = np.linalg.inv(np.asarray(prior_cov, float))
    return j


def _spd_solve(m: NDArray[np.float64], rhs: NDArray[np.float64], what: str):
    """Cholesky solve with a flagged trace ridge as the fallback."""
    try:
        return cho_solve(cho_factor(m), rhs)
    except np.linalg.LinAlgError:
        ridge = 1e-12 * max(np.trace(m), 1.0)
        warnings.warn(f"{what}: singular matrix, ridge applied")
        return cho_solve(cho_factor(m + ridge * np.eye(m.shape[0])), rhs)


def bfim_step(j_prev_b: FimMatrix, j_current: FimMatrix, model_cov) -> FimMatrix:
    """One step of the Bayesian information recursion.

    Adds the mobility prior's information to the current snapshot's and
    discounts it by what the previous posterior actually knew.  Only the
    position block carries memory; per-slot gains are fresh unknowns.
    """
    j_prev_b = np.asarray(j_prev_b, float)
    j_current = np.asarray(j_current, float)
    if j_prev_b.shape != j_current.shape:
        raise ValueError("information matrices must have equal shape")
    dim = j_current.shape[0]
    cq_inv = np.linalg.inv(np.asarray(model_cov, float))
    m = j_prev_b.copy()
    m[:3, :3] += cq_inv
    out = j_current.copy()
    out[:3, :3] += cq_inv
    if not (np.any(m[3:, 3:]) or np.any(m[:3, 3:])):
        # prior carries position information only (e.g. the first slot);
        # the Schur complement then reduces to the 3x3 position block
        core = np.linalg.inv(m[:3, :3])
    else:
        core = _spd_solve(m, np.eye(dim), "bfim_step")[:3, :3]
    out[:3, :3] -= cq_inv @ core @ cq_inv
    return 0.5 * (out + out.T)


def position_bcrb(j_b: FimMatrix) -> NDArray[np.float64]:
    """Position variance bound: first three diagonal entries of J_B^{-1}."""
    j_b = np.asarray(j_b, float)
    inv = _spd_solve(j_b, np.eye(j_b.shape[0]), "position_bcrb")
    return np.diag(inv)[:3].copy()


def _aoa_jacobian(params: ParamVector, scene: SceneConfig) -> NDArray[np.float64]:
    """Rows d theta_i / d [p; angle(rho); |rho|]; gain columns are zero."""
    k = params.n_paths
    t = np.zeros((k, 2 * k + 3))
    for i in range(k):
        t[i, :3] = aoa_gradient(scene.ris_positions[i], params.position,
                                scene.user_direction)
    return t


def aoa_bound(j_b: FimMatrix, params: ParamVector, scene: SceneConfig,
              form: str = "paper") -> NDArray[np.float64]:
    """Per-path AoA variance bound under a parameter transformation.

    form="paper" evaluates diag((T J_B T^T)^{-1}) with T the cosine
    Jacobian, exactly as the source derivation writes it.  That matrix has
    rank at most 3, so for K >= 4 paths it is singular and this form
    raises.  form="standard" evaluates diag(T J_B^{-1} T^T), the usual
    transformed-parameter bound, and is what the experiment harness
    reports; a pseudo-inverse with a warning covers singular J_B.
    """
    j_b = np.asarray(j_b, float)
    t = _aoa_jacobian(params, scene)
    if form == "paper":
        core = t @ j_b @ t.T
        try:
            inv = np.linalg.inv(core)
        except np.linalg.LinAlgError as e:
            raise ValueError("transformed information matrix is singular "
                             "(rank <= 3 by construction)") from e
        cond = np.linalg.cond(core)
        if cond > 1e12:
            raise ValueError("transformed information matrix is singular "
                             f"(condition number {cond:.2e})")
        return np.diag(inv).copy()
    if form == "standard":
        try:
            inner = cho_solve(cho_factor(j_b), t.T)
        except np.linalg.LinAlgError:
            warnings.warn("aoa_bound: singular information matrix, pseudo-inverse used")
            inner = np.linalg.pinv(j_b, hermitian=True) @ t.T
        return np.einsum("ij,ji->i", t, inner).copy()
    raise ValueError(f"unknown form {form!r}")
