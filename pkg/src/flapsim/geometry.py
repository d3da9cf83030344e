"""Ellipsoid geometry used by the stateless fluid models."""

import numpy as np
from scipy.integrate import quad


def ellipsoid_volume(semi_axes):
    a, b, c = semi_axes
    return 4.0 / 3.0 * np.pi * a * b * c


def solid_ellipsoid_inertia(mass, semi_axes):
    a, b, c = semi_axes
    return mass / 5.0 * np.diag([b * b + c * c, a * a + c * c, a * a + b * b])


def projected_area(semi_axes, direction):
    """Silhouette area of an ellipsoid seen along ``direction``.

    Parameters
    ----------
    semi_axes : (..., 3) array
    direction : (..., 3) array
        Unit vectors in the ellipsoid frame.

    Raises
    ------
    ValueError
        If any direction has zero length.
    """
    s = np.asarray(semi_axes, dtype=float)
    u = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(u, axis=-1)
    if np.any(norm == 0.0):
        raise ValueError("projected_area needs a nonzero direction")
    u = u / norm[..., None]
    a, b, c = s[..., 0], s[..., 1], s[..., 2]
    return np.pi * np.sqrt((b * c * u[..., 0]) ** 2 + (a * c * u[..., 1]) ** 2 + (a * b * u[..., 2]) ** 2)


def _lamb_coefficients(semi_axes):
    """Lamb's shape integrals alpha_i = abc * int_0^inf dl / ((s_i^2 + l) * Delta(l))."""
    a, b, c = semi_axes
    abc = a * b * c

    def delta(lam):
        return np.sqrt((a * a + lam) * (b * b + lam) * (c * c + lam))

    out = []
    for s in semi_axes:
        val, _ = quad(lambda lam, s=s: 1.0 / ((s * s + lam) * delta(lam)), 0.0, np.inf, limit=200)
        out.append(abc * val)
    return np.array(out)


def ellipsoid_added_mass(semi_axes, density):
    """Kirchhoff added mass (3,) and added moment of inertia (3,) of an ellipsoid.

    Classical potential-flow results; the three shape integrals sum to 2.
    """
    s = np.asarray(semi_axes, dtype=float)
    alpha = _lamb_coefficients(s)
    rho_v = density * ellipsoid_volume(s)
    added_mass = rho_v * alpha / (2.0 - alpha)
    added_inertia = np.zeros(3)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        sj2, sk2 = s[j] ** 2, s[k] ** 2
        diff = sj2 - sk2
        if abs(diff) < 1e-15 * max(sj2, sk2):
            continue  # body of revolution about this axis
        num = diff**2 * (alpha[k] - alpha[j])
        den = 2.0 * diff + (sj2 + sk2) * (alpha[j] - alpha[k])
        added_inertia[i] = rho_v / 5.0 * num / den
    return added_mass, added_inertia


def drag_moments(semi_axes):
    """Per-axis reference moments (m^5) for quadratic angular drag."""
    s = np.asarray(semi_axes, dtype=float)
    out = np.empty(3)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        out[i] = 8.0 / 15.0 * np.pi * s[i] * max(s[j], s[k]) ** 4
    return out
