"""Array geometry: direction cosines and line-spectrum steering vectors.

Every array in the scene is a half-wavelength uniform linear array, so a
propagation direction enters the signal model only through its cosine with
the array axis, and every steering vector is a complex exponential that is
linear in the element index.  Positions are plain length-3 float arrays.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "Position3",
    "UnitVector3",
    "SteeringVector",
    "as_position",
    "as_unit",
    "aoa_cosine",
    "aoa_gradient",
    "steering",
    "line_spectrum",
]

# Type aliases for readability of signatures; all are plain ndarrays.
Position3 = NDArray[np.float64]      # shape (3,), meters
UnitVector3 = NDArray[np.float64]    # shape (3,), unit Euclidean norm
SteeringVector = NDArray[np.complex128]  # shape (n_elements,)

# Below this separation the direction of arrival is undefined.
_MIN_RANGE = 1e-9


def as_position(p) -> Position3:
    """Coerce to a float64 length-3 vector with finite components."""
    p = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("position components must be finite")
    return p


def as_unit(v) -> UnitVector3:
    """Coerce to a unit-norm length-3 vector; reject near-zero input."""
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if n < _MIN_RANGE:
        raise ValueError("direction vector has (near-)zero norm")
    return v / n


def aoa_cosine(p_anchor: Position3, p_user: Position3, axis: UnitVector3) -> float:
    """Cosine of the angle between an array axis and the anchor direction.

    Parameters
    ----------
    p_anchor : (3,) array
        Position of the far end of the path (an RIS, or the BS).
    p_user : (3,) array
        Position of the array whose axis is `axis`.
    axis : (3,) array
        Unit orientation vector of that array.

    Returns
    -------
    float in [-1, 1].  The result is exact up to rounding; tiny excursions
    outside [-1, 1] from floating arithmetic are clipped.
    """
    diff = np.asarray(p_anchor, float) - np.asarray(p_user, float)
    d = np.linalg.norm(diff)
    if d < _MIN_RANGE:
        raise ValueError("anchor and user positions coincide; AoA undefined")
    return float(np.clip(diff @ np.asarray(axis, float) / d, -1.0, 1.0))


def aoa_gradient(p_anchor: Position3, p_user: Position3, axis: UnitVector3) -> NDArray[np.float64]:
    """Gradient of :func:`aoa_cosine` with respect to the user position.

    Equals (-axis + cos * e) / d with e the unit vector from user to anchor
    and d their separation.  Always orthogonal to e: sliding the user along
    the line of sight changes the range but not the angle.
    """
    diff = np.asarray(p_anchor, float) - np.asarray(p_user, float)
    d = np.linalg.norm(diff)
    if d < _MIN_RANGE:
        raise ValueError("anchor and user positions coincide; AoA undefined")
    e = diff / d
    axis = np.asarray(axis, float)
    cos = e @ axis
    return (-axis + cos * e) / d


def steering(cosine: float, n_elements: int) -> SteeringVector:
    """Steering vector [1, e^{j pi cos}, ..., e^{j pi (N-1) cos}] of a ULA.

    `cosine` must lie in [-1, 1] (a direction cosine); values outside are a
    caller error, not something to clamp silently.
    """
    if n_elements < 1:
        raise ValueError("n_elements must be positive")
    if abs(cosine) > 1.0 + 1e-12:
        raise ValueError(f"direction cosine {cosine} outside [-1, 1]")
    cosine = float(np.clip(cosine, -1.0, 1.0))
    return np.exp(1j * np.pi * cosine * np.arange(n_elements))


def line_spectrum(phase: float, n_elements: int) -> SteeringVector:
    """Vector [1, e^{j phase}, ..., e^{j (N-1) phase}] for any real phase.

    Same object as :func:`steering` but parameterized by the per-element
    phase increment directly, with no range restriction; the angular
    estimator works in this wrapped-phase domain.
    """
    if n_elements < 1:
        raise ValueError("n_elements must be positive")
    return np.exp(1j * phase * np.arange(n_elements))
