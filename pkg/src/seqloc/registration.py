"""Least-squares pose fitting from point correspondences, with uncertainty.

3-DOF planar alignment is closed form (rotation from the 2x2 cross
covariance); the 4-DOF variant adds the mean height offset, the analytic
Jacobian, and the (J^T J)^-1 covariance with its minimum eigenvalue as the
observability signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Cov4, Pose3, Pose4, rot_z

__all__ = [
    "DegenerateFitError",
    "UnobservablePoseError",
    "FitResult3",
    "FitResult4",
    "fit_pose3",
    "fit_pose4",
    "jacobian",
    "pose_uncertainty",
]


class DegenerateFitError(ValueError):
    """Too few pairs, or geometry leaving the rotation undetermined."""


class UnobservablePoseError(ValueError):
    """J^T J is singular; carries lambda_min for the caller's status logic."""

    def __init__(self, msg: str, lambda_min: float = 0.0):
        super().__init__(msg)
        self.lambda_min = lambda_min


@dataclass(frozen=True)
class FitResult3:
    pose: Pose3
    inlier_count: int
    rms_residual: float


@dataclass(frozen=True)
class FitResult4:
    pose: Pose4
    cov: Cov4
    sigma: tuple[float, float, float]  # (sigma_x, sigma_y, sigma_yaw)
    lambda_min: float
    inlier_count: int
    rms_residual: float


def _planar_fit(q_pts: np.ndarray, m_pts: np.ndarray) -> tuple[float, np.ndarray]:
    """Yaw and planar translation minimizing sum ||R_z q + t - m||^2 in xy."""
    q = np.asarray(q_pts, dtype=float)
    m = np.asarray(m_pts, dtype=float)
    if q.shape != m.shape or q.ndim != 2 or q.shape[1] != 3:
        raise DegenerateFitError(f"pair shapes mismatch: {q.shape} vs {m.shape}")
    if len(q) < 3:
        raise DegenerateFitError(f"need >= 3 pairs, got {len(q)}")
    qc = q[:, :2].mean(axis=0)
    mc = m[:, :2].mean(axis=0)
    dq = q[:, :2] - qc
    dm = m[:, :2] - mc
    h = dq.T @ dm  # 2x2 cross covariance
    # optimal planar rotation: atan2 of the skew part over the trace
    sin_num = h[0, 1] - h[1, 0]
    cos_num = h[0, 0] + h[1, 1]
    if math.hypot(sin_num, cos_num) < 1e-12:
        raise DegenerateFitError("xy cross-covariance rank < 1; yaw undetermined")
    yaw = math.atan2(sin_num, cos_num)
    r = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
    t = mc - r @ qc
    return yaw, t


def _rms(q, m, pose: Pose4) -> float:
    res = q @ rot_z(pose.yaw).T + pose.xyz - m
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def fit_pose3(q_pts: np.ndarray, m_pts: np.ndarray) -> FitResult3:
    """Closed-form planar least-squares alignment; z is ignored."""
    yaw, t = _planar_fit(q_pts, m_pts)
    pose = Pose3(float(t[0]), float(t[1]), yaw)
    q = np.asarray(q_pts, dtype=float)
    m = np.asarray(m_pts, dtype=float)
    res = q[:, :2] @ np.array(
        [[math.cos(yaw), math.sin(yaw)], [-math.sin(yaw), math.cos(yaw)]]
    ) + t - m[:, :2]
    rms = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    return FitResult3(pose=pose, inlier_count=len(q), rms_residual=rms)


def fit_pose4(q_pts: np.ndarray, m_pts: np.ndarray) -> FitResult4:
    """Planar fit plus mean height offset, covariance, and lambda_min."""
    yaw, t = _planar_fit(q_pts, m_pts)
    q = np.asarray(q_pts, dtype=float)
    m = np.asarray(m_pts, dtype=float)
    z = float(np.mean(m[:, 2] - q[:, 2]))
    pose = Pose4(float(t[0]), float(t[1]), z, yaw)
    j = jacobian(q, pose)
    cov, sigma, lambda_min = pose_uncertainty(j)
    return FitResult4(
        pose=pose,
        cov=cov,
        sigma=sigma,
        lambda_min=lambda_min,
        inlier_count=len(q),
        rms_residual=_rms(q, m, pose),
    )


def jacobian(q_pts: np.ndarray, pose: Pose4) -> np.ndarray:
    """(3n x 4) derivative of residuals r_k = R_z(yaw) q_k + t - m_k.

    Columns are (x, y, z, yaw); the translation block is identity, the yaw
    column is (dR_z/dyaw) q_k.
    """
    q = np.asarray(q_pts, dtype=float)
    n = len(q)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dr = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    j = np.zeros((3 * n, 4))
    j[0::3, 0] = 1.0
    j[1::3, 1] = 1.0
    j[2::3, 2] = 1.0
    dyaw = q @ dr.T
    j[0::3, 3] = dyaw[:, 0]
    j[1::3, 3] = dyaw[:, 1]
    return j


def pose_uncertainty(j: np.ndarray) -> tuple[Cov4, tuple[float, float, float], float]:
    """cov = (J^T J)^-1, sigma = sqrt(diag)[0,1,3], lambda_min = min eig.

    Raises UnobservablePoseError on a singular normal matrix; unit measurement
    variance is assumed, so the covariance is the plain inverse.
    """
    h = j.T @ j
    eigs = np.linalg.eigvalsh(h)
    lambda_min = float(max(eigs[0], 0.0))
    if eigs[0] <= 1e-12:
        raise UnobservablePoseError(
            f"singular normal matrix (lambda_min={eigs[0]:g})", lambda_min=0.0
        )
    cov_m = np.linalg.inv(h)
    cov = Cov4(0.5 * (cov_m + cov_m.T))
    return cov, cov.sigma_xyyaw, lambda_min
