"""Central-difference verification of analytic gradients."""

import numpy as np


def grad_check(f, point, direction, epsilon):
    """Compare an analytic directional derivative against central differences.

    f maps an ndarray to (scalar value, gradient ndarray of the same shape).
    The analytic directional derivative <grad, direction> at `point` is
    compared with (f(point + eps*dir) - f(point - eps*dir)) / (2*eps).

    Returns |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    Raises ValueError if any evaluation produces non-finite values.
    """
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if point.shape != direction.shape:
        raise ValueError(
            f"direction shape {direction.shape} must match point shape {point.shape}")
    value, grad = f(point)
    grad = np.asarray(grad)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise ValueError("non-finite value or gradient at the base point")
    analytic = float(np.vdot(grad, direction))
    f_plus, _ = f(point + epsilon * direction)
    f_minus, _ = f(point - epsilon * direction)
    if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
        raise ValueError("non-finite value at a shifted evaluation point")
    numeric = (f_plus - f_minus) / (2.0 * epsilon)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
