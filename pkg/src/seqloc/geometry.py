"""Planar-dominant 4-DOF pose algebra and first-order covariance propagation.

State order is fixed to (x, y, z, yaw) everywhere. Yaw is stored in radians
and kept canonical in (-pi, pi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose3",
    "Pose4",
    "Cov4",
    "Motion",
    "wrap_angle",
    "rot_z",
    "compose",
    "inverse",
    "apply",
    "propagate",
]


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    wrapped = a - 2.0 * np.pi * np.floor((a + np.pi) / (2.0 * np.pi))
    # floor maps the -pi boundary to -pi; the convention is open at -pi
    wrapped = np.where(wrapped <= -np.pi, np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def rot_z(yaw: float) -> np.ndarray:
    """3x3 rotation about z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose4:
    """4-DOF pose: planar position + height + heading."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose fields: {vals}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def to_matrix(self) -> np.ndarray:
        """4x4 homogeneous transform."""
        m = np.eye(4)
        m[:3, :3] = rot_z(self.yaw)
        m[:3, 3] = self.xyz
        return m


@dataclass(frozen=True)
class Pose3:
    """Planar pose (x, y, yaw)."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ValueError("non-finite pose fields")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def to_pose4(self, z: float = 0.0) -> Pose4:
        return Pose4(self.x, self.y, z, self.yaw)


@dataclass(frozen=True)
class Cov4:
    """4x4 covariance over (x, y, z, yaw)."""

    m: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"covariance must be 4x4, got {m.shape}")
        scale = max(1.0, float(np.abs(m).max()))
        if not np.allclose(m, m.T, atol=1e-9 * scale):
            raise ValueError("covariance not symmetric")
        m = 0.5 * (m + m.T)
        eigs = np.linalg.eigvalsh(m)
        if eigs.min() < -1e-9 * max(np.trace(m), 1.0):
            raise ValueError(f"covariance not PSD (min eig {eigs.min():g})")
        object.__setattr__(self, "m", m)

    @classmethod
    def diag(cls, sx2: float, sy2: float, sz2: float, syaw2: float) -> "Cov4":
        return cls(np.diag([sx2, sy2, sz2, syaw2]))

    @property
    def sigma_xyyaw(self):
        """(sigma_x, sigma_y, sigma_yaw) = sqrt of diagonal entries 0, 1, 3."""
        d = np.sqrt(np.maximum(np.diag(self.m), 0.0))
        return float(d[0]), float(d[1]), float(d[3])


@dataclass(frozen=True)
class Motion:
    """Body-frame odometry increment with its covariance."""

    delta: Pose4
    cov: Cov4 = field(default_factory=Cov4)


def compose(a: Pose4, b: Pose4) -> Pose4:
    """a then b: position rotated by a.yaw plus a's position; yaws add."""
    p = rot_z(a.yaw) @ b.xyz + a.xyz
    return Pose4(p[0], p[1], p[2], a.yaw + b.yaw)


def inverse(t: Pose4) -> Pose4:
    p = -(rot_z(-t.yaw) @ t.xyz)
    return Pose4(p[0], p[1], p[2], -t.yaw)


def apply(t: Pose4, p) -> np.ndarray:
    """Transform point(s) of shape (3,) or (n, 3) into t's parent frame."""
    p = np.asarray(p, dtype=float)
    return p @ rot_z(t.yaw).T + t.xyz


def _motion_jacobian(yaw: float) -> np.ndarray:
    """Derivative of the composed pose w.r.t. the body-frame increment."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [c, -s, 0.0, 0.0],
            [s, c, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def propagate(
    prev: Pose4, prev_cov: Cov4, m: Motion, full_propagation: bool = False
) -> tuple[Pose4, Cov4]:
    """Dead-reckon one odometry step with additive first-order covariance.

    cov' = prev_cov + A @ m.cov @ A.T where A rotates the planar part of the
    increment into the world frame. With full_propagation the prior term is
    additionally mapped through the pose Jacobian G, which couples prior yaw
    uncertainty into position; the default additive form drops that coupling.
    """
    pose = compose(prev, m.delta)
    a = _motion_jacobian(prev.yaw)
    prior = prev_cov.m
    if full_propagation:
        c, s = math.cos(prev.yaw), math.sin(prev.yaw)
        dx, dy = m.delta.x, m.delta.y
        g = np.eye(4)
        g[0, 3] = -s * dx - c * dy
        g[1, 3] = c * dx - s * dy
        prior = g @ prior @ g.T
    cov = Cov4(prior + a @ m.cov.m @ a.T)
    return pose, cov
