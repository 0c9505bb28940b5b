"""SO(3) primitives: hat operator, exponential and logarithmic maps.

Rotation vectors are axis-angle 3-vectors with angle ``||phi||`` in radians.
``log_so3`` always returns an angle in ``[0, pi]``. At an angle of exactly
pi both ``k*pi`` and ``-k*pi`` describe the same rotation; the returned axis
is then sign-normalized so that its first non-negligible component is
positive.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidRotationError

SMALL_ANGLE = 1e-8
_NEAR_PI = 1e-2


def skew(v) -> np.ndarray:
    """Cross-product matrix ``S`` with ``S @ w == np.cross(v, w)``.

    Accepts a single 3-vector or a stack of shape ``(..., 3)``.
    """
    v = np.asarray(v, dtype=float)
    s = np.zeros(v.shape[:-1] + (3, 3))
    s[..., 0, 1] = -v[..., 2]
    s[..., 0, 2] = v[..., 1]
    s[..., 1, 0] = v[..., 2]
    s[..., 1, 2] = -v[..., 0]
    s[..., 2, 0] = -v[..., 1]
    s[..., 2, 1] = v[..., 0]
    return s


def vee(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.stack([s[..., 2, 1], s[..., 0, 2], s[..., 1, 0]], axis=-1)


def exp_so3(phi) -> np.ndarray:
    """Rodrigues' formula, vectorized over leading axes.

    Below ``SMALL_ANGLE`` the coefficients ``sin(t)/t`` and
    ``(1 - cos(t))/t**2`` are replaced by their second-order Taylor series.
    """
    phi = np.asarray(phi, dtype=float)
    flat = phi.reshape(-1, 3)
    x, y, z = flat[:, 0], flat[:, 1], flat[:, 2]
    theta2 = x * x + y * y + z * z
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    # I + a K + b K^2 with K^2 = phi phi^T - theta^2 I, written entrywise
    c = 1.0 - b * theta2
    bx, by = b * x, b * y
    ax, ay, az = a * x, a * y, a * z
    xy, xz, yz = bx * y, bx * z, by * z
    out = np.empty((len(flat), 3, 3))
    out[:, 0, 0] = c + bx * x
    out[:, 1, 1] = c + by * y
    out[:, 2, 2] = c + b * z * z
    out[:, 0, 1], out[:, 1, 0] = xy - az, xy + az
    out[:, 0, 2], out[:, 2, 0] = xz + ay, xz - ay
    out[:, 1, 2], out[:, 2, 1] = yz - ax, yz + ax
    return out.reshape(phi.shape[:-1] + (3, 3))


def is_rotation(r, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def _sign_normalize(axis: np.ndarray) -> np.ndarray:
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def log_so3(r, tol: float = 1e-9, check: bool = True) -> np.ndarray:
    """Rotation vector of ``r`` with angle in ``[0, pi]``.

    ``check=False`` skips validation for matrices that are rotations by
    construction, such as products of :func:`exp_so3` outputs.

    Raises:
        InvalidRotationError: if ``r`` is not orthonormal with unit
            determinant within ``tol``.
    """
    r = np.asarray(r, dtype=float)
    if check and not is_rotation(r, tol):
        raise InvalidRotationError("matrix is not a rotation within tolerance %g" % tol)

    w = 0.5 * vee(r - r.T)  # sin(theta) * axis
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(r) - 1.0)
    theta = float(np.arctan2(s, c))

    if theta < SMALL_ANGLE:
        return w
    if theta < np.pi - _NEAR_PI:
        return (theta / s) * w

    # near pi: recover the axis from the symmetric part, largest diagonal first
    kk = (0.5 * (r + r.T) - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(kk)))
    axis = kk[:, i] / np.sqrt(kk[i, i])
    axis /= np.linalg.norm(axis)
    if s > 1e-14:
        if axis @ w < 0:
            axis = -axis
    else:
        axis = _sign_normalize(axis)
    return theta * axis


def canonical_rotvec(phi) -> np.ndarray:
    """Equivalent rotation vector with angle wrapped into ``[0, pi]``."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    if theta <= np.pi:
        return phi.copy()
    axis = phi / theta
    theta = np.mod(theta, 2.0 * np.pi)
    if theta > np.pi:
        axis, theta = -axis, 2.0 * np.pi - theta
    if theta == np.pi:
        axis = _sign_normalize(axis)
    return theta * axis
