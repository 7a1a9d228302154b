"""Point-mass walking model with an external hand contact.

All ZMP algebra lives here: the LIPM zero moment point, the ZMP with an
additional hand force, the shift between the two and the one-parameter
family of hand forces that realizes a requested shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Contacts lower than this are rejected: the force line divides by p_z.
P_Z_MIN = 0.05
# Relative guard on m*g - f_z.
DEN_REL_EPS = 1e-6


class DegenerateDenominator(ValueError):
    """m*g - f_z is too close to zero for the hand-ZMP expressions."""


class DegenerateContactHeight(ValueError):
    """Contact point too close to the ground plane."""


@dataclass(frozen=True)
class WorldParams:
    m: float = 62.5
    g: float = 9.81
    c_z: float = 0.78
    dt: float = 0.1

    def __post_init__(self):
        for name in ("m", "g", "c_z", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def weight(self) -> float:
        return self.m * self.g

    @property
    def eps_den(self) -> float:
        return DEN_REL_EPS * self.m * self.g

    @property
    def omega(self) -> float:
        return float(np.sqrt(self.g / self.c_z))


def _vec2(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(2)
    return a


@dataclass(frozen=True)
class LipmState:
    """Horizontal CoM position, velocity and acceleration (x, y)."""

    c: np.ndarray = field(default_factory=lambda: np.zeros(2))
    c_dot: np.ndarray = field(default_factory=lambda: np.zeros(2))
    c_ddot: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for name in ("c", "c_dot", "c_ddot"):
            v = _vec2(getattr(self, name))
            if not np.all(np.isfinite(v)):
                raise ValueError(f"LipmState.{name} must be finite")
            object.__setattr__(self, name, v)

    def axis(self, i: int) -> np.ndarray:
        """(c, c_dot, c_ddot) along one horizontal axis."""
        return np.array([self.c[i], self.c_dot[i], self.c_ddot[i]])


def rotation_from_normal(normal, tangent_hint=None) -> np.ndarray:
    """Rows (b, t, n) of a right-handed surface frame with n along ``normal``."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if tangent_hint is None:
        tangent_hint = [0.0, 0.0, 1.0] if abs(n[2]) < 0.9 else [1.0, 0.0, 0.0]
    h = np.asarray(tangent_hint, dtype=float)
    b = h - n * (h @ n)
    b /= np.linalg.norm(b)
    t = np.cross(n, b)
    return np.vstack([b, t, n])


@dataclass(frozen=True)
class ContactPoint:
    """Candidate hand contact: location, surface frame and force limits.

    ``rotation`` maps a world-frame force to surface coordinates (b, t, n);
    its last row is the surface normal pointing toward the robot.
    """

    p: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    mu: float = 1.0
    f_n_max: float = 200.0
    id: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0.0):
            raise ValueError("contact rotation must be orthonormal")
        if self.mu < 0 or self.f_n_max < 0:
            raise ValueError("mu and f_n_max must be nonnegative")
        if abs(p[2]) < P_Z_MIN:
            raise DegenerateContactHeight(
                f"contact {self.id}: |p_z| = {abs(p[2]):.3g} < {P_Z_MIN}"
            )
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "rotation", R)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[2]

    def cone_residual(self, force) -> float:
        """Largest violation of the linearized friction cone (<= 0 inside)."""
        fb, ft, fn = self.rotation @ np.asarray(force, dtype=float)
        return max(
            fb - self.mu * fn,
            -fb - self.mu * fn,
            ft - self.mu * fn,
            -ft - self.mu * fn,
            -fn,
            fn - self.f_n_max,
        )


def propagate(state: LipmState, jerk, params: WorldParams, dt: float | None = None) -> LipmState:
    """Integrate constant jerk over one step (exact for the triple integrator)."""
    h = params.dt if dt is None else dt
    j = _vec2(jerk)
    c, v, a = state.c, state.c_dot, state.c_ddot
    return LipmState(
        c + h * v + h * h / 2 * a + h**3 / 6 * j,
        v + h * a + h * h / 2 * j,
        a + h * j,
    )


def zmp_lipm(state: LipmState, params: WorldParams) -> np.ndarray:
    return state.c - params.c_z / params.g * state.c_ddot


def _denominator(f_z: float, params: WorldParams) -> float:
    den = params.weight - f_z
    if den <= params.eps_den:
        raise DegenerateDenominator(
            f"m*g - f_z = {den:.3g} N is below the guard {params.eps_den:.3g} N"
        )
    return den


def zmp_hand(state: LipmState, f_c, p, params: WorldParams) -> np.ndarray:
    """ZMP of the foot forces when the hand applies ``f_c`` at ``p``."""
    f = np.asarray(f_c, dtype=float)
    p = np.asarray(p, dtype=float)
    m, g = params.m, params.g
    den = _denominator(f[2], params)
    num = m * params.c_z * state.c_ddot - m * g * state.c - p[2] * f[:2] + p[:2] * f[2]
    return -num / den


def delta_z(state: LipmState, f_c, p, params: WorldParams) -> np.ndarray:
    """Shift of the ZMP caused by the hand force (zmp_hand - zmp_lipm)."""
    f = np.asarray(f_c, dtype=float)
    p = np.asarray(p, dtype=float)
    den = _denominator(f[2], params)
    lever = -p[:2] - params.c_z / params.g * state.c_ddot + state.c
    return (p[2] * f[:2] + lever * f[2]) / den


def force_line_coeffs(state: LipmState, p, dz, params: WorldParams) -> tuple[np.ndarray, np.ndarray]:
    """(slope, offset) with f_xy = slope * f_z + offset realizing shift ``dz``."""
    p = np.asarray(p, dtype=float)
    if abs(p[2]) < P_Z_MIN:
        raise DegenerateContactHeight(f"|p_z| = {abs(p[2]):.3g} < {P_Z_MIN}")
    dz = _vec2(dz)
    slope = (p[:2] + params.c_z / params.g * state.c_ddot - state.c - dz) / p[2]
    offset = params.weight * dz / p[2]
    return slope, offset


def force_line(state: LipmState, p, dz, f_z: float, params: WorldParams) -> np.ndarray:
    """Horizontal hand force that, together with ``f_z``, shifts the ZMP by ``dz``."""
    slope, offset = force_line_coeffs(state, p, dz, params)
    return slope * f_z + offset
