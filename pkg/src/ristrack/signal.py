"""Forward model: scene description, user mobility, path gains, snapshots.

The only propagation paths are BS -> RIS -> user reflections.  Per slot the
user's array observes a superposition of K such paths plus circular complex
Gaussian noise; everything that multiplies the steering vector of a path is
folded into one equivalent complex gain.  Non-reflected multipath is treated
as part of the noise floor and never simulated explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from numpy.typing import NDArray
from scipy.constants import speed_of_light

from .geometry import Position3, aoa_cosine, as_position, as_unit, steering

__all__ = [
    "SceneConfig",
    "SlotGroundTruth",
    "dbm_to_watts",
    "watts_to_dbm",
    "free_space_gain",
    "equivalent_gain",
    "synthesize",
    "generate_trajectory",
    "slot_truth",
    "default_scene",
]


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def watts_to_dbm(p_w: float) -> float:
    if p_w <= 0:
        raise ValueError("power must be positive")
    return 10.0 * np.log10(p_w) + 30.0


def _as_cov(c) -> NDArray[np.float64]:
    """Accept a 3-vector of per-axis variances or a full 3x3 matrix."""
    c = np.asarray(c, dtype=float)
    if c.shape == (3,):
        c = np.diag(c)
    if c.shape != (3, 3):
        raise ValueError("covariance must be a 3-vector of variances or 3x3")
    c = 0.5 * (c + c.T)
    if np.linalg.eigvalsh(c).min() < -1e-10:
        raise ValueError("covariance must be positive semidefinite")
    return c


@dataclass
class SceneConfig:
    """Static scene parameters: arrays, anchors, mobility, noise.

    Distances in meters, noise power in watts (use :func:`dbm_to_watts`
    when reading dBm figures), covariances in m^2.  `n_ris` counts elements
    of each RIS; the number of surfaces K is the length of `ris_positions`.
    """

    wavelength: float                      # carrier wavelength, m
    noise_power_w: float                   # sigma_n^2, W
    n_bs: int
    n_ris: int
    n_user: int
    bs_position: Position3
    ris_positions: NDArray[np.float64]     # (K, 3)
    ris_directions: NDArray[np.float64]    # (K, 3), unit rows
    user_direction: NDArray[np.float64]    # e_U, unit
    mobility_cov: NDArray[np.float64]      # C_p, drives the true random walk
    model_cov: NDArray[np.float64]         # C_q, assumed by tracker and bounds
    n_slots: int
    initial_position: Position3
    bs_direction: NDArray[np.float64] = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    reflection: NDArray[np.float64] | None = None   # per-RIS amplitude, default 1
    bounds: NDArray[np.float64] | None = None       # (3, 2) low/high, default 30x30x6 box around start

    def __post_init__(self):
        self.bs_position = as_position(self.bs_position)
        self.initial_position = as_position(self.initial_position)
        self.ris_positions = np.atleast_2d(np.asarray(self.ris_positions, float))
        if self.ris_positions.shape[0] < 2:
            raise ValueError("need at least two RIS anchors")
        self.ris_directions = np.vstack([as_unit(v) for v in np.atleast_2d(self.ris_directions)])
        if self.ris_directions.shape != self.ris_positions.shape:
            raise ValueError("one direction per RIS required")
        self.user_direction = as_unit(self.user_direction)
        self.bs_direction = as_unit(self.bs_direction)
        self.mobility_cov = _as_cov(self.mobility_cov)
        self.model_cov = _as_cov(self.model_cov)
        if self.reflection is None:
            self.reflection = np.ones(self.n_paths)
        else:
            self.reflection = np.asarray(self.reflection, float).reshape(self.n_paths)
        if self.bounds is None:
            half = np.array([15.0, 15.0, 3.0])
            self.bounds = np.stack([self.initial_position - half,
                                    self.initial_position + half], axis=1)
        else:
            self.bounds = np.asarray(self.bounds, float).reshape(3, 2)
        if np.any(self.bounds[:, 1] < self.bounds[:, 0]):
            raise ValueError("bounds must satisfy low <= high per axis")
        if min(self.wavelength, self.noise_power_w) < 0 or self.wavelength == 0:
            raise ValueError("wavelength must be positive, noise power nonnegative")
        for n in (self.n_bs, self.n_ris, self.n_user, self.n_slots):
            if int(n) < 1:
                raise ValueError("array sizes and slot count must be positive")

    @property
    def n_paths(self) -> int:
        return self.ris_positions.shape[0]

    # Static link geometry; fixed once the anchors are placed.

    def bs_ris_distances(self) -> NDArray[np.float64]:
        return np.linalg.norm(self.ris_positions - self.bs_position, axis=1)

    def ris_aoa_from_bs(self) -> NDArray[np.float64]:
        """Arrival cosines at each RIS for the BS illumination."""
        return np.array([aoa_cosine(self.bs_position, p, e)
                         for p, e in zip(self.ris_positions, self.ris_directions)])

    def bs_aod(self) -> NDArray[np.float64]:
        """Departure cosines at the BS toward each RIS."""
        return np.array([aoa_cosine(p, self.bs_position, self.bs_direction)
                         for p in self.ris_positions])

    def user_aoas(self, position: Position3) -> NDArray[np.float64]:
        """Arrival cosines at the user array, one per RIS path."""
        return np.array([aoa_cosine(p, position, self.user_direction)
                         for p in self.ris_positions])

    def ris_aod_to_user(self, position: Position3) -> NDArray[np.float64]:
        """Departure cosines at each RIS toward a given user position."""
        return np.array([aoa_cosine(position, p, e)
                         for p, e in zip(self.ris_positions, self.ris_directions)])

    # Serialization -----------------------------------------------------

    @classmethod
    def from_dict(cls, cfg: dict) -> "SceneConfig":
        cfg = dict(cfg)
        if "carrier_wavelength_m" in cfg:
            wavelength = float(cfg["carrier_wavelength_m"])
        elif "carrier_frequency_ghz" in cfg:
            wavelength = speed_of_light / (float(cfg["carrier_frequency_ghz"]) * 1e9)
        else:
            raise KeyError("config needs carrier_wavelength_m or carrier_frequency_ghz")
        if "noise_power_dbm" in cfg:
            noise = dbm_to_watts(float(cfg["noise_power_dbm"]))
        else:
            noise = float(cfg["noise_power_w"])
        ris = cfg["ris"]
        positions = np.array([r["position"] for r in ris], float)
        directions = np.array([r["direction"] for r in ris], float)
        reflection = np.array([float(r.get("reflection", 1.0)) for r in ris])
        bounds = None
        if "bounds" in cfg:
            b = cfg["bounds"]
            if "low" in b:
                bounds = np.stack([np.asarray(b["low"], float),
                                   np.asarray(b["high"], float)], axis=1)
            else:
                c = np.asarray(b["center"], float)
                h = 0.5 * np.asarray(b["size"], float)
                bounds = np.stack([c - h, c + h], axis=1)
        mobility = _as_cov(cfg["mobility_cov"])
        return cls(
            wavelength=wavelength,
            noise_power_w=noise,
            n_bs=int(cfg["n_bs"]),
            n_ris=int(cfg["n_ris"]),
            n_user=int(cfg["n_user"]),
            bs_position=cfg["bs_position"],
            bs_direction=cfg.get("bs_direction", (0.0, 1.0, 0.0)),
            ris_positions=positions,
            ris_directions=directions,
            reflection=reflection,
            user_direction=cfg["user_direction"],
            mobility_cov=mobility,
            model_cov=_as_cov(cfg["model_cov"]) if "model_cov" in cfg else mobility,
            n_slots=int(cfg["n_slots"]),
            initial_position=cfg["initial_position"],
            bounds=bounds,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "SceneConfig":
        with open(path, "r") as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass
class SlotGroundTruth:
    """Everything the simulator knows about one slot."""

    user_position: Position3
    aoas: NDArray[np.float64]        # cosines at the user array, (K,)
    gains: NDArray[np.complex128]    # equivalent path gains, (K,)
    received: NDArray[np.complex128]  # (N_U,)


def free_space_gain(d_bs_ris: float, d_ris_user: float, wavelength: float) -> complex:
    """Cascaded free-space gain of one reflection path.

    Magnitude lambda / (4 pi (d1 + d2)), phase minus the total path length
    in wavelengths.
    """
    if d_bs_ris <= 0 or d_ris_user <= 0:
        raise ValueError("path distances must be positive")
    total = d_bs_ris + d_ris_user
    return (wavelength / (4.0 * np.pi * total)) * np.exp(-2j * np.pi * total / wavelength)


def equivalent_gain(rho_ub: complex,
                    aod_ris: float,
                    aoa_ris: float,
                    aod_bs: float,
                    ris_phases: NDArray[np.complex128],
                    bs_beam: NDArray[np.complex128]) -> complex:
    """Equivalent complex gain of one path under a beam configuration.

    Parameters
    ----------
    rho_ub : complex
        Free-space gain of the path (already scaled by sqrt(power) and the
        RIS reflection amplitude if applicable).
    aod_ris, aoa_ris : float
        Departure cosine at the RIS toward the user and arrival cosine of
        the BS illumination at the RIS.
    aod_bs : float
        Departure cosine at the BS toward this RIS.
    ris_phases : (N_R,) complex
        Unit-modulus per-element reflection phases.
    bs_beam : (N_B,) complex
        Unit-norm BS precoder.
    """
    ris_phases = np.asarray(ris_phases)
    bs_beam = np.asarray(bs_beam)
    if np.max(np.abs(np.abs(ris_phases) - 1.0)) > 1e-6:
        raise ValueError("RIS phases must be unit modulus")
    if abs(np.linalg.norm(bs_beam) - 1.0) > 1e-6:
        raise ValueError("BS beam must have unit norm")
    a_out = steering(aod_ris, ris_phases.size)
    a_in = steering(aoa_ris, ris_phases.size)
    a_bs = steering(aod_bs, bs_beam.size)
    ris_factor = np.vdot(a_out, ris_phases * a_in)
    return complex(rho_ub * ris_factor * np.vdot(a_bs, bs_beam))


def synthesize(aoas: NDArray[np.float64],
               gains: NDArray[np.complex128],
               noise_var: float,
               n_user: int,
               rng: np.random.Generator) -> NDArray[np.complex128]:
    """One noisy snapshot at the user array.

    y = sum_i gains[i] * a(aoas[i]) + n with n ~ CN(0, noise_var I).
    """
    if noise_var < 0:
        raise ValueError("noise variance must be nonnegative")
    y = np.zeros(n_user, dtype=complex)
    for theta, rho in zip(np.atleast_1d(aoas), np.atleast_1d(gains)):
        y += rho * steering(float(theta), n_user)
    if noise_var > 0:
        scale = np.sqrt(noise_var / 2.0)
        y += scale * (rng.standard_normal(n_user) + 1j * rng.standard_normal(n_user))
    return y


def _reflect(x: NDArray[np.float64], low: NDArray[np.float64], high: NDArray[np.float64]) -> NDArray[np.float64]:
    """Fold a point into [low, high] per axis by mirror reflection."""
    span = high - low
    out = x.copy()
    for k in range(x.size):
        if span[k] <= 0:
            out[k] = low[k]
            continue
        r = np.mod(out[k] - low[k], 2.0 * span[k])
        out[k] = low[k] + (r if r <= span[k] else 2.0 * span[k] - r)
    return out


def generate_trajectory(config: SceneConfig, rng: np.random.Generator) -> NDArray[np.float64]:
    """Random-walk trajectory of `n_slots` positions.

    Steps are N(0, C_p) from the initial position; each position is folded
    back into the scene cuboid by reflection, so the walk never leaves it.
    Returns shape (T, 3); the initial (slot-0) position is not included.
    """
    # PSD square root; cholesky would reject the zero-mobility edge case.
    w, v = np.linalg.eigh(config.mobility_cov)
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    steps = rng.standard_normal((config.n_slots, 3)) @ root.T
    low, high = config.bounds[:, 0], config.bounds[:, 1]
    out = np.empty((config.n_slots, 3))
    p = config.initial_position.astype(float)
    for t in range(config.n_slots):
        p = _reflect(p + steps[t], low, high)
        out[t] = p
    return out


def slot_truth(config: SceneConfig,
               position: Position3,
               ris_phases: NDArray[np.complex128],
               bs_beam: NDArray[np.complex128],
               power_w: float,
               rng: np.random.Generator) -> SlotGroundTruth:
    """Assemble the ground truth of one slot under a beam configuration.

    `ris_phases` has one row per RIS.  The transmit power scales every
    path's free-space gain by sqrt(power_w).
    """
    position = as_position(position)
    d1 = config.bs_ris_distances()
    theta_in = config.ris_aoa_from_bs()
    psi_bs = config.bs_aod()
    aoas = config.user_aoas(position)
    aod = config.ris_aod_to_user(position)
    gains = np.empty(config.n_paths, dtype=complex)
    for i in range(config.n_paths):
        d2 = float(np.linalg.norm(position - config.ris_positions[i]))
        rho_ub = (np.sqrt(power_w) * config.reflection[i]
                  * free_space_gain(float(d1[i]), d2, config.wavelength))
        gains[i] = equivalent_gain(rho_ub, float(aod[i]), float(theta_in[i]),
                                   float(psi_bs[i]), ris_phases[i], bs_beam)
    received = synthesize(aoas, gains, config.noise_power_w, config.n_user, rng)
    return SlotGroundTruth(position, aoas, gains, received)


def default_scene(n_ris: int = 64, **overrides) -> SceneConfig:
    """Reference evaluation scene: seven wall-mounted surfaces around a
    30 x 30 x 6 m service area, 28 GHz carrier, -84 dBm noise floor."""
    base = dict(
        wavelength=speed_of_light / 28e9,
        noise_power_w=dbm_to_watts(-84.0),
        n_bs=32,
        n_ris=n_ris,
        n_user=17,
        bs_position=np.array([20.0, 0.0, 0.0]),
        bs_direction=np.array([0.0, 1.0, 0.0]),
        ris_positions=np.array([
            [-35.0, 5.0, -10.0],
            [-30.0, 20.0, 10.0],
            [-20.0, 25.0, 20.0],
            [-10.0, 40.0, 10.0],
            [0.0, 20.0, 10.0],
            [10.0, 15.0, 20.0],
            [30.0, 20.0, 5.0],
        ]),
        ris_directions=np.array([
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ]),
        user_direction=np.array([1.0, 0.0, 0.0]),
        mobility_cov=np.diag([0.03, 0.03, 0.01]),
        model_cov=np.diag([0.03, 0.03, 0.01]),
        n_slots=300,
        initial_position=np.array([-10.0, 0.0, 0.0]),
    )
    base.update(overrides)
    return SceneConfig(**base)
