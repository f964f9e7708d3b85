"""Particle filter: initialization, prediction, clustering, the three-factor
observation model, low-variance resampling, convergence detection, and state
estimation.

The particle set is stored as flat numpy arrays so every per-particle
operation is vectorized; clustering is exact single-linkage computed on a
uniform grid with sparse connected components.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import spectral
from .geometry import Pose3, wrap_angle
from .mapstore import MapIndex
from .spectral import SpectralParams, VerificationResult
from .worldsim import Submap

__all__ = [
    "Particle",
    "ParticleSet",
    "Cluster",
    "MclParams",
    "init_uniform",
    "predict",
    "cluster",
    "weight_global",
    "weight_spectral",
    "weight_pose_error",
    "update_weights",
    "resample_low_variance",
    "check_converged",
    "occupied_cells",
    "estimate_state",
]

LOG_FLOOR = -50.0  # per-particle log-factor floor


@dataclass(frozen=True)
class Particle:
    """Scalar view of one particle (the set itself is array-backed)."""

    x: float
    y: float
    yaw: float
    w: float


@dataclass
class ParticleSet:
    xy: np.ndarray  # (n, 2)
    yaw: np.ndarray  # (n,)
    w: np.ndarray  # (n,)
    normalized: bool = False

    def __post_init__(self):
        if len(self.xy) == 0:
            raise ValueError("particle set must be non-empty")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("weights must be finite and >= 0")
        if self.normalized:
            total = float(self.w.sum())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"weights not normalized (sum {total})")

    def __len__(self):
        return len(self.xy)

    def __getitem__(self, i: int) -> Particle:
        return Particle(
            float(self.xy[i, 0]), float(self.xy[i, 1]),
            float(self.yaw[i]), float(self.w[i]),
        )

    def normalize(self) -> "ParticleSet":
        total = float(self.w.sum())
        if total <= 0:
            raise ValueError("total weight is zero")
        return ParticleSet(self.xy, self.yaw, self.w / total, normalized=True)


@dataclass
class Cluster:
    member_indices: np.ndarray
    centroid: tuple[float, float]
    nearest_submap: Submap | None = None
    verification: VerificationResult | None = None
    pose_star: Pose3 | None = None  # world-frame pose from the cluster's fit

    @property
    def size(self) -> int:
        return len(self.member_indices)


@dataclass(frozen=True)
class MclParams:
    n_init: int = 5000
    n_conv: int = 400
    d_cluster: float = 5.0
    k_thr: int = 40
    sigma_pe: tuple[float, float, float] = (30.0, 30.0, math.radians(60.0))
    # per-step roughening std (x, y, yaw); the yaw term doubles as the only
    # mechanism regenerating heading diversity after resampling
    motion_noise: tuple[float, float, float] = (0.1, 0.1, 0.02)
    conv_grid: float = 5.0
    # the occupancy count includes every stray sample, so the converged
    # plateau sits near 20-35 cells at several thousand particles; 40
    # separates it cleanly from the exploring regime (hundreds of cells)
    conv_cells: int = 40
    conv_steps: int = 3
    # N_eff / n below which the engine resamples; 1.0 resamples every update
    # (a lower trigger lets negligible-weight stragglers survive and stalls
    # the selection pressure that tightens the converged swarm)
    resample_frac: float = 1.0
    p_floor: float = 0.25  # hole / empty-query global factor
    # verifications below this inlier count are chance matches; their scores
    # and fitted poses must not steer the filter
    sm_min_inliers: int = 10
    use_sm: bool = True
    use_pe: bool = True
    spectral: SpectralParams = field(default_factory=SpectralParams)

    def __post_init__(self):
        if self.n_init < 1 or self.n_conv < 1 or self.k_thr < 1:
            raise ValueError("particle counts and k_thr must be >= 1")
        if self.d_cluster <= 0 or self.conv_grid <= 0:
            raise ValueError("grids must be positive")
        if not 0.0 <= self.resample_frac <= 1.0:
            raise ValueError("resample_frac must be in [0, 1]")


def init_uniform(bounds, n_init: int, rng) -> ParticleSet:
    """n_init particles uniform over (x0, y0, x1, y1) and yaw in (-pi, pi]."""
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    x0, y0, x1, y1 = bounds
    xy = np.column_stack(
        [rng.uniform(x0, x1, size=n_init), rng.uniform(y0, y1, size=n_init)]
    )
    yaw = wrap_angle(rng.uniform(-np.pi, np.pi, size=n_init))
    w = np.full(n_init, 1.0 / n_init)
    return ParticleSet(xy, np.atleast_1d(yaw), w, normalized=True)


def predict(ps: ParticleSet, motion, noise, rng) -> ParticleSet:
    """Advance each particle by the body-frame increment plus Gaussian noise."""
    noise = np.asarray(noise, dtype=float)
    n = len(ps)
    dx = motion.delta.x + rng.normal(0.0, noise[0], size=n) if noise[0] > 0 else np.full(n, motion.delta.x)
    dy = motion.delta.y + rng.normal(0.0, noise[1], size=n) if noise[1] > 0 else np.full(n, motion.delta.y)
    dyaw = motion.delta.yaw + rng.normal(0.0, noise[2], size=n) if noise[2] > 0 else np.full(n, motion.delta.yaw)
    c, s = np.cos(ps.yaw), np.sin(ps.yaw)
    xy = ps.xy + np.column_stack([c * dx - s * dy, s * dx + c * dy])
    yaw = wrap_angle(ps.yaw + dyaw)
    return ParticleSet(xy, yaw, ps.w.copy(), normalized=ps.normalized)


def _cluster_labels(xy: np.ndarray, d_cluster: float) -> np.ndarray:
    """Exact single-linkage components under xy-distance < d_cluster.

    Particles sharing a fine grid cell (side d/2, diagonal < d) are connected
    outright; cross-cell candidate pairs within two cells are distance-checked
    explicitly, then components come from a sparse graph.
    """
    n = len(xy)
    g = d_cluster / 2.0
    cells = np.floor(xy / g).astype(np.int64)
    # composite key is collision-free while |cell index| < 2^31
    key = cells[:, 0] * (2**32) + cells[:, 1]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    uniq_key, first, counts = np.unique(sorted_key, return_index=True, return_counts=True)

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []

    # same-cell chains: connect each particle to its cell's first particle
    if np.any(counts > 1):
        ncells = len(uniq_key)
        group = np.repeat(np.arange(ncells), counts)  # cell id per sorted slot
        not_first = np.ones(n, dtype=bool)
        not_first[first] = False
        rows.append(order[first[group[not_first]]])
        cols.append(order[not_first])

    # cross-cell candidates: offsets within Chebyshev distance 2 (half, by symmetry)
    offsets = [
        (ox, oy) for ox in range(0, 3) for oy in range(-2, 3) if (ox, oy) > (0, 0)
    ]
    d2 = d_cluster * d_cluster
    a_all: list[np.ndarray] = []
    b_all: list[np.ndarray] = []
    for ox, oy in offsets:
        shifted = uniq_key + ox * (2**32) + oy
        pos = np.searchsorted(uniq_key, shifted)
        pos = np.clip(pos, 0, len(uniq_key) - 1)
        hit = uniq_key[pos] == shifted
        if np.any(hit):
            a_all.append(np.flatnonzero(hit))  # cell index in uniq order
            b_all.append(pos[hit])

    if a_all:
        a_cells = np.concatenate(a_all)
        b_cells = np.concatenate(b_all)
        rep = order[first]  # one representative particle per cell
        # cheap first pass: a representative hit settles the cell pair
        dd = np.sum((xy[rep[a_cells]] - xy[rep[b_cells]]) ** 2, axis=1)
        close = dd < d2
        rows.append(rep[a_cells[close]])
        cols.append(rep[b_cells[close]])

        # cell pairs the representatives missed only matter if the cells are
        # still in different provisional components; dense blobs are already
        # fully linked here, so the expensive all-pairs expansion below runs
        # on a small remainder (typically blob boundaries)
        open_a, open_b = a_cells[~close], b_cells[~close]
        if len(open_a):
            r = np.concatenate(rows)
            c = np.concatenate(cols)
            pre = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
            _, comp = connected_components(pre, directed=False)
            undecided = comp[rep[open_a]] != comp[rep[open_b]]
            open_a, open_b = open_a[undecided], open_b[undecided]
        if len(open_a):
            ca = counts[open_a]
            cb = counts[open_b]
            tot = ca * cb
            pair = np.repeat(np.arange(len(tot)), tot)
            start = np.concatenate([[0], np.cumsum(tot)[:-1]])
            within = np.arange(int(tot.sum())) - start[pair]
            ia = order[first[open_a][pair] + within // cb[pair]]
            ib = order[first[open_b][pair] + within % cb[pair]]
            dd = np.sum((xy[ia] - xy[ib]) ** 2, axis=1)
            keep = dd < d2
            rows.append(ia[keep])
            cols.append(ib[keep])

    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    else:
        graph = coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def cluster(ps: ParticleSet, d_cluster: float) -> list[Cluster]:
    """Partition particles into single-linkage clusters; deterministic order
    (by smallest member index), weighted centroids."""
    labels = _cluster_labels(ps.xy, d_cluster)
    clusters = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        wsum = float(ps.w[members].sum())
        if wsum > 0:
            cw = ps.w[members] / wsum
            cx = float(cw @ ps.xy[members, 0])
            cy = float(cw @ ps.xy[members, 1])
        else:
            cx, cy = map(float, ps.xy[members].mean(axis=0))
        clusters.append(Cluster(member_indices=members, centroid=(cx, cy)))
    clusters.sort(key=lambda c: int(c.member_indices[0]))
    return clusters


def _global_cos(q: Submap, idx: MapIndex, submap_indices: np.ndarray) -> np.ndarray:
    return idx.global_descs[submap_indices] @ q.global_desc


def weight_global(p: Particle, q: Submap, idx: MapIndex, p_floor: float = 0.25,
                  r_max: float | None = None) -> float:
    """(cos(f_q, f_nearest) + 1) / 2; the floor factor over holes / empty queries."""
    if q.empty:
        return p_floor
    sm = idx.nearest(p.x, p.y, r_max=r_max)
    if sm is None:
        return p_floor
    return (float(q.global_desc @ sm.global_desc) + 1.0) / 2.0


def global_factors(ps: ParticleSet, q: Submap, idx: MapIndex,
                   p_floor: float = 0.25, r_max: float | None = None) -> np.ndarray:
    """Vectorized weight_global over the whole particle set."""
    n = len(ps)
    if q.empty:
        return np.full(n, p_floor)
    nearest = idx.nearest_many(ps.xy, r_max=r_max)
    factors = np.full(n, p_floor)
    hit = nearest >= 0
    if np.any(hit):
        factors[hit] = (_global_cos(q, idx, nearest[hit]) + 1.0) / 2.0
    return factors


def weight_spectral(
    clusters: list[Cluster],
    q: Submap,
    idx: MapIndex,
    k_thr: int = 40,
    params: SpectralParams | None = None,
    min_inliers: int = 10,
) -> np.ndarray:
    """Per-cluster score ratio s*_k / s*_max; all ones when gated or starved.

    Side effect: fills each cluster's nearest_submap, verification, and the
    world-frame pose_star derived from the verification fit. Verifications
    with fewer than min_inliers inliers are chance-level: their score counts
    as 0 and no pose_star is recorded, so a spurious match can neither win
    the ratio nor attract particles through the pose-error kernel. If no
    cluster clears the bar the factors are uninformative (all ones).
    """
    n_k = len(clusters)
    if n_k >= k_thr:
        return np.ones(n_k)
    params = params or SpectralParams()
    cache: dict[int, VerificationResult] = {}
    scores = np.zeros(n_k)
    for k, cl in enumerate(clusters):
        sm = idx.nearest(cl.centroid[0], cl.centroid[1])
        cl.nearest_submap = sm
        if sm is None:
            continue
        res = cache.get(sm.id)
        if res is None:
            res = spectral.verify(q, sm, params)
            cache[sm.id] = res
        cl.verification = res
        if res.n_inliers < min_inliers:
            continue
        scores[k] = res.score
        if res.pose3 is not None:
            # the fit lives in the submap-local frame = world minus centroid
            cl.pose_star = Pose3(
                res.pose3.x + sm.centroid[0],
                res.pose3.y + sm.centroid[1],
                res.pose3.yaw,
            )
    s_max = scores.max() if n_k else 0.0
    if s_max <= 0:
        return np.ones(n_k)
    return scores / s_max


def weight_pose_error(p: Particle, pose_star: Pose3, sigma_pe) -> float:
    """Gaussian kernel over (dx, dy, wrapped dyaw)."""
    sx, sy, syaw = sigma_pe
    dx = p.x - pose_star.x
    dy = p.y - pose_star.y
    dyaw = wrap_angle(p.yaw - pose_star.yaw)
    return math.exp(
        -(dx * dx) / (2 * sx * sx)
        - (dy * dy) / (2 * sy * sy)
        - (dyaw * dyaw) / (2 * syaw * syaw)
    )


def _pose_error_factors(
    ps: ParticleSet, clusters: list[Cluster], sigma_pe
) -> np.ndarray:
    """Vectorized per-particle kernel against each cluster's own pose_star."""
    sx, sy, syaw = sigma_pe
    factors = np.ones(len(ps))
    for cl in clusters:
        if cl.pose_star is None:
            continue
        m = cl.member_indices
        dx = ps.xy[m, 0] - cl.pose_star.x
        dy = ps.xy[m, 1] - cl.pose_star.y
        dyaw = wrap_angle(ps.yaw[m] - cl.pose_star.yaw)
        factors[m] = np.exp(
            -(dx**2) / (2 * sx**2)
            - (dy**2) / (2 * sy**2)
            - (dyaw**2) / (2 * syaw**2)
        )
    return factors


def update_weights(
    ps: ParticleSet,
    q: Submap,
    idx: MapIndex,
    params: MclParams,
    clusters: list[Cluster] | None = None,
) -> tuple[ParticleSet, dict]:
    """One observation update: w <- w * g * sm * pe in log space, renormalized.

    Variant flags (use_sm / use_pe) disable the spectral and pose-error
    factors. Returns (new set, info) where info carries the clusters, the
    factor vectors, and a weight-collapse flag.
    """
    if clusters is None:
        clusters = cluster(ps, params.d_cluster)
    n = len(ps)
    g = global_factors(ps, q, idx, p_floor=params.p_floor)
    sm_c = np.ones(len(clusters))
    pe = np.ones(n)
    if params.use_sm:
        sm_c = weight_spectral(clusters, q, idx, k_thr=params.k_thr,
                               params=params.spectral,
                               min_inliers=params.sm_min_inliers)
        if params.use_pe and len(clusters) < params.k_thr:
            pe = _pose_error_factors(ps, clusters, params.sigma_pe)
    sm = np.ones(n)
    for k, cl in enumerate(clusters):
        sm[cl.member_indices] = sm_c[k]

    with np.errstate(divide="ignore"):
        logf = np.log(g) + np.log(sm) + np.log(pe)
    logf = np.maximum(logf, LOG_FLOOR)
    logw = np.log(np.maximum(ps.w, 1e-300)) + logf
    logw -= logw.max()
    w = np.exp(logw)
    total = float(w.sum())
    collapsed = not np.isfinite(total) or total <= 0
    if collapsed:
        w = np.full(n, 1.0 / n)
    else:
        w = w / total
    out = ParticleSet(ps.xy.copy(), ps.yaw.copy(), w, normalized=True)
    info = {
        "clusters": clusters,
        "g": g,
        "sm": sm,
        "pe": pe,
        "collapsed": collapsed,
    }
    return out, info


def effective_sample_size(ps: ParticleSet) -> float:
    return 1.0 / float(np.sum(ps.w**2))


def resample_low_variance(ps: ParticleSet, m_out: int, rng) -> ParticleSet:
    """Systematic resampling with a single random offset; uniform out-weights."""
    if not ps.normalized:
        ps = ps.normalize()
    n = len(ps)
    positions = (rng.uniform(0.0, 1.0) + np.arange(m_out)) / m_out
    cum = np.cumsum(ps.w)
    cum[-1] = 1.0
    # side="right" keeps zero-weight particles unselectable at a zero offset
    idx = np.searchsorted(cum, positions, side="right")
    idx = np.clip(idx, 0, n - 1)
    return ParticleSet(
        ps.xy[idx].copy(),
        ps.yaw[idx].copy(),
        np.full(m_out, 1.0 / m_out),
        normalized=True,
    )


def occupied_cells(ps: ParticleSet, conv_grid: float) -> int:
    cells = np.floor(ps.xy / conv_grid).astype(np.int64)
    return len(np.unique(cells[:, 0] * (2**32) + cells[:, 1]))


def check_converged(history, conv_cells: int, conv_steps: int) -> bool:
    """True when the occupied-cell count stayed <= conv_cells for the last
    conv_steps entries of the history."""
    if len(history) < conv_steps:
        return False
    return all(h <= conv_cells for h in list(history)[-conv_steps:])


def estimate_state(ps: ParticleSet, d_cluster: float = 5.0,
                   clusters: list[Cluster] | None = None) -> tuple[Pose3, float]:
    """Weighted mean over the dominant cluster, circular mean for yaw."""
    if not ps.normalized:
        ps = ps.normalize()
    if clusters is None:
        clusters = cluster(ps, d_cluster)
    totals = [float(ps.w[c.member_indices].sum()) for c in clusters]
    k = int(np.argmax(totals))
    dom = clusters[k]
    m = dom.member_indices
    wsum = totals[k]
    if wsum <= 0:
        w = np.full(len(m), 1.0 / len(m))
    else:
        w = ps.w[m] / wsum
    x = float(w @ ps.xy[m, 0])
    y = float(w @ ps.xy[m, 1])
    yaw = float(np.arctan2(w @ np.sin(ps.yaw[m]), w @ np.cos(ps.yaw[m])))
    return Pose3(x, y, yaw), wsum
