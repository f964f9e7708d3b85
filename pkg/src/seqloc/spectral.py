"""Spatial verification between two submaps.

Pipeline: descriptor matching -> pairwise distance-consistency affinity ->
principal eigenvector by power iteration -> greedy one-to-one inlier
extraction -> inter-cluster score, plus an optional planar pose fit from
the surviving inliers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import registration
from .geometry import Pose3
from .worldsim import Submap

__all__ = [
    "SpectralParams",
    "Correspondence",
    "VerificationResult",
    "match_descriptors",
    "build_affinity",
    "principal_eigenvector",
    "extract_inliers",
    "inter_cluster_score",
    "verify",
]


@dataclass(frozen=True)
class SpectralParams:
    tau_d: float = 1.0  # distance-consistency cutoff (m)
    theta_accept: float = 0.3  # min mean affinity to accepted inliers
    eps_v: float = 1e-6  # stop when the best remaining eigvec entry drops below
    n_max: int = 256  # cap on initial correspondences (bounds the n^2 affinity)
    mutual_check: bool = False
    power_tol: float = 1e-9
    power_max_iters: int = 1000


@dataclass(frozen=True)
class Correspondence:
    q_idx: int
    m_idx: int
    desc_dist: float


@dataclass
class VerificationResult:
    correspondences: list[Correspondence]
    eigvec: np.ndarray
    inliers: list[int]
    score: float
    pose3: Pose3 | None = None
    degenerate: bool = False

    @property
    def n_inliers(self) -> int:
        return len(self.inliers)

    def inlier_pairs(self, q: Submap, m: Submap) -> tuple[np.ndarray, np.ndarray]:
        qi = np.array([self.correspondences[i].q_idx for i in self.inliers], dtype=int)
        mi = np.array([self.correspondences[i].m_idx for i in self.inliers], dtype=int)
        return q.keypoints[qi], m.keypoints[mi]


def match_descriptors(
    q: Submap, m: Submap, k: int = 1, params: SpectralParams | None = None
) -> list[Correspondence]:
    """Nearest-neighbor descriptor matching, capped at n_max by distance."""
    params = params or SpectralParams()
    if q.empty or m.empty:
        return []
    # squared Euclidean distances via the Gram expansion
    d2 = (
        np.sum(q.descriptors**2, axis=1)[:, None]
        + np.sum(m.descriptors**2, axis=1)[None, :]
        - 2.0 * q.descriptors @ m.descriptors.T
    )
    np.maximum(d2, 0.0, out=d2)
    k = min(k, d2.shape[1])
    nn = np.argsort(d2, axis=1)[:, :k] if k > 1 else np.argmin(d2, axis=1)[:, None]
    corrs = []
    if params.mutual_check:
        back = np.argmin(d2, axis=0)
    for qi in range(d2.shape[0]):
        for mi in nn[qi]:
            if params.mutual_check and back[mi] != qi:
                continue
            corrs.append(Correspondence(qi, int(mi), float(np.sqrt(d2[qi, mi]))))
    corrs.sort(key=lambda c: (c.desc_dist, c.q_idx, c.m_idx))
    return corrs[: params.n_max]


def build_affinity(
    corrs: list[Correspondence],
    q_pts: np.ndarray,
    m_pts: np.ndarray,
    tau_d: float = 1.0,
) -> np.ndarray:
    """Truncated-linear pairwise distance-consistency kernel, zero diagonal."""
    n = len(corrs)
    if n == 0:
        return np.zeros((0, 0))
    qi = np.array([c.q_idx for c in corrs])
    mi = np.array([c.m_idx for c in corrs])
    qs = np.asarray(q_pts)[qi]
    ms = np.asarray(m_pts)[mi]
    dq = np.linalg.norm(qs[:, None, :] - qs[None, :, :], axis=2)
    dm = np.linalg.norm(ms[:, None, :] - ms[None, :, :], axis=2)
    a = np.maximum(0.0, 1.0 - np.abs(dq - dm) / tau_d)
    np.fill_diagonal(a, 0.0)
    return a


def principal_eigenvector(a: np.ndarray, params: SpectralParams | None = None) -> np.ndarray:
    """Nonnegative unit eigenvector of a symmetric nonnegative matrix.

    Power iteration from the uniform vector; an all-zero matrix returns the
    uniform vector (the degenerate, score-0 case).
    """
    params = params or SpectralParams()
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    v = np.full(n, 1.0 / np.sqrt(n))
    if not np.any(a):
        return v
    for _ in range(params.power_max_iters):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return np.full(n, 1.0 / np.sqrt(n))
        w /= norm
        if np.max(np.abs(w - v)) < params.power_tol:
            v = w
            break
        v = w
    return v


def extract_inliers(
    a: np.ndarray,
    v: np.ndarray,
    corrs: list[Correspondence],
    params: SpectralParams | None = None,
) -> list[int]:
    """Greedy discretization of the eigenvector under a one-to-one constraint.

    Candidates are visited by decreasing eigenvector entry; one is accepted
    when its q/m indices are unused and its mean affinity to the accepted set
    is at least theta_accept.
    """
    params = params or SpectralParams()
    order = np.argsort(-v, kind="stable")
    accepted: list[int] = []
    used_q: set[int] = set()
    used_m: set[int] = set()
    for i in order:
        if v[i] < params.eps_v:
            break
        c = corrs[i]
        if c.q_idx in used_q or c.m_idx in used_m:
            continue
        if accepted:
            mean_aff = float(np.mean(a[i, accepted]))
            if mean_aff < params.theta_accept:
                continue
        accepted.append(int(i))
        used_q.add(c.q_idx)
        used_m.add(c.m_idx)
    return accepted


def inter_cluster_score(a: np.ndarray, inliers) -> float:
    """Total pairwise affinity over the inlier set (both orderings counted)."""
    if len(inliers) == 0:
        return 0.0
    sub = a[np.ix_(inliers, inliers)]
    return float(sub.sum())


def verify(
    q: Submap, m: Submap | None, params: SpectralParams | None = None
) -> VerificationResult:
    """Full verification pipeline; degrades to a score-0 result when starved."""
    params = params or SpectralParams()
    if m is None or q.empty or m.empty:
        return VerificationResult([], np.zeros(0), [], 0.0, degenerate=True)
    corrs = match_descriptors(q, m, params=params)
    if len(corrs) < 2:
        inl = [0] if len(corrs) == 1 else []
        return VerificationResult(
            corrs, np.ones(len(corrs)), inl, 0.0, degenerate=True
        )
    a = build_affinity(corrs, q.keypoints, m.keypoints, tau_d=params.tau_d)
    v = principal_eigenvector(a, params)
    inliers = extract_inliers(a, v, corrs, params)
    score = inter_cluster_score(a, inliers)
    pose3 = None
    if len(inliers) >= 3:
        qi = np.array([corrs[i].q_idx for i in inliers])
        mi = np.array([corrs[i].m_idx for i in inliers])
        try:
            fit = registration.fit_pose3(q.keypoints[qi], m.keypoints[mi])
            pose3 = fit.pose
        except registration.DegenerateFitError:
            pose3 = None
    return VerificationResult(corrs, v, inliers, score, pose3=pose3)
