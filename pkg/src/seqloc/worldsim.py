"""Synthetic landmark worlds, prior-map submaps, and noisy query sequences.

Replaces real mapping/scanning data: landmarks carry deterministic unit
descriptors derived from (seed, id), submaps are rendered by range gating,
and odometry noise is injected per step. Everything is a pure function of
its inputs and the configured seed.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Cov4, Motion, Pose4, apply, compose, inverse, wrap_angle

__all__ = [
    "Rect",
    "WorldConfig",
    "World",
    "Submap",
    "QuerySequence",
    "generate_world",
    "landmark_descriptor",
    "render_submap",
    "build_prior_map",
    "generate_query",
    "world_to_json",
    "world_from_json",
    "sequence_to_json",
    "sequence_from_json",
]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle (x0, y0) .. (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x, y):
        return (self.x0 <= x) & (x < self.x1) & (self.y0 <= y) & (y < self.y1)

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)


@dataclass(frozen=True)
class WorldConfig:
    extent: tuple[float, float] = (1000.0, 60.0)
    landmark_density: float = 0.05
    scarce_regions: tuple[tuple[Rect, float], ...] = ()
    hole_regions: tuple[Rect, ...] = ()
    descriptor_dim: int = 32
    descriptor_noise_sigma: float = 0.0
    odometry_noise: tuple[float, float, float, float] = (0.02, 0.02, 0.005, 0.002)
    z_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("extent must be positive")
        if self.landmark_density < 0:
            raise ValueError("density must be >= 0")
        if any(d < 0 for _, d in self.scarce_regions):
            raise ValueError("scarce-region density must be >= 0")
        if self.descriptor_dim < 8:
            raise ValueError("descriptor_dim must be >= 8")


@dataclass(frozen=True)
class World:
    landmarks: np.ndarray  # (n, 3) positions
    landmark_ids: np.ndarray  # (n,) int64
    config: WorldConfig
    base_descriptors: np.ndarray = field(repr=False, default=None)  # (n, dim)

    def __post_init__(self):
        if self.base_descriptors is None:
            descs = _base_descriptors(
                self.config.seed, self.landmark_ids, self.config.descriptor_dim
            )
            object.__setattr__(self, "base_descriptors", descs)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_ids)

    @property
    def xy_tree(self) -> cKDTree:
        tree = getattr(self, "_xy_tree", None)
        if tree is None:
            tree = cKDTree(self.landmarks[:, :2]) if self.n_landmarks else None
            object.__setattr__(self, "_xy_tree", tree)
        return tree


@dataclass
class Submap:
    """A local chunk of the scene: keypoints + descriptors in sensor frame."""

    id: int
    centroid: np.ndarray  # (3,)
    keypoints: np.ndarray  # (k, 3) in submap-local frame
    descriptors: np.ndarray  # (k, dim), unit rows
    global_desc: np.ndarray  # (dim,), unit (zero sentinel when empty)
    source_landmark_ids: np.ndarray  # (k,), simulation-only ground truth

    @property
    def empty(self) -> bool:
        return len(self.keypoints) == 0

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)


@dataclass
class QueryFrame:
    true_pose: Pose4
    submap: Submap
    odometry: Motion


@dataclass
class QuerySequence:
    frames: list[QueryFrame]

    def __len__(self):
        return len(self.frames)


def _base_descriptors(seed: int, ids: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic unit descriptor per landmark id, independent of order."""
    out = np.empty((len(ids), dim))
    for i, lid in enumerate(ids):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(lid)]))
        v = rng.standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


def _region_density(cfg: WorldConfig, x, y):
    d = np.full_like(np.asarray(x, dtype=float), cfg.landmark_density)
    for rect, dens in cfg.scarce_regions:
        d = np.where(rect.contains(x, y), dens, d)
    return d


def generate_world(cfg: WorldConfig) -> World:
    """Sample a landmark field by thinned Poisson sampling, seeded."""
    w, h = cfg.extent
    if w * h <= 0:
        raise ValueError("zero-area extent")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0x77]))
    d_max = max([cfg.landmark_density] + [d for _, d in cfg.scarce_regions])
    if d_max == 0:
        pts = np.empty((0, 3))
    else:
        n = rng.poisson(d_max * w * h)
        x = rng.uniform(0, w, size=n)
        y = rng.uniform(0, h, size=n)
        # thin to the local density (rejection sampling keeps the field Poisson)
        keep = rng.uniform(0, d_max, size=n) < _region_density(cfg, x, y)
        x, y = x[keep], y[keep]
        z = rng.uniform(-cfg.z_noise, cfg.z_noise, size=len(x))
        pts = np.column_stack([x, y, z])
    ids = np.arange(len(pts), dtype=np.int64)
    return World(landmarks=pts, landmark_ids=ids, config=cfg)


def landmark_descriptor(world: World, landmark_id: int, rng=None) -> np.ndarray:
    """Noisy observation of a landmark's base descriptor, re-normalized."""
    idx = np.searchsorted(world.landmark_ids, landmark_id)
    if idx >= world.n_landmarks or world.landmark_ids[idx] != landmark_id:
        raise KeyError(f"unknown landmark id {landmark_id}")
    base = world.base_descriptors[idx]
    sigma = world.config.descriptor_noise_sigma
    if rng is None or sigma == 0.0:
        return base.copy()
    v = base + rng.normal(0.0, sigma, size=base.shape)
    return v / np.linalg.norm(v)


def _observe_descriptors(world: World, idx: np.ndarray, rng, noise_sigma) -> np.ndarray:
    descs = world.base_descriptors[idx].copy()
    if rng is not None and noise_sigma > 0 and len(idx):
        descs = descs + rng.normal(0.0, noise_sigma, size=descs.shape)
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    return descs


def render_submap(
    world: World,
    sensor_pose: Pose4,
    radius: float,
    submap_id: int,
    rng=None,
    noise_sigma: float | None = None,
) -> Submap:
    """Range-gate landmarks around the sensor and express them locally.

    An empty submap (no landmarks in range) is legal and flagged via .empty;
    its global descriptor is the all-zero sentinel.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if noise_sigma is None:
        noise_sigma = world.config.descriptor_noise_sigma
    if world.n_landmarks:
        idx = np.sort(
            np.asarray(
                world.xy_tree.query_ball_point(
                    [sensor_pose.x, sensor_pose.y], radius
                ),
                dtype=int,
            )
        )
    else:
        idx = np.array([], dtype=int)
    inv = inverse(sensor_pose)
    keypoints = apply(inv, world.landmarks[idx]) if len(idx) else np.empty((0, 3))
    descs = _observe_descriptors(world, idx, rng, noise_sigma)
    dim = world.config.descriptor_dim
    if len(idx):
        g = descs.mean(axis=0)
        norm = np.linalg.norm(g)
        global_desc = g / norm if norm > 0 else np.zeros(dim)
    else:
        global_desc = np.zeros(dim)
    return Submap(
        id=submap_id,
        centroid=np.array([sensor_pose.x, sensor_pose.y, sensor_pose.z]),
        keypoints=keypoints,
        descriptors=descs,
        global_desc=global_desc,
        source_landmark_ids=world.landmark_ids[idx],
    )


def build_prior_map(
    world: World, grid: float = 5.0, radius: float | None = None
) -> list[Submap]:
    """One submap per occupied grid cell outside the hole regions.

    Submaps are rendered from a virtual sensor at the cell center with yaw 0,
    so submap-local coordinates are world coordinates minus the centroid.
    The map is rendered noise-free (the prior map is the clean survey).
    """
    if grid <= 0:
        raise ValueError("grid must be positive")
    if radius is None:
        radius = 2.0 * grid
    w, h = world.config.extent
    nx = int(np.ceil(w / grid))
    ny = int(np.ceil(h / grid))
    if world.n_landmarks == 0:
        return []
    cell = np.floor(world.landmarks[:, :2] / grid).astype(int)
    occupied = set(map(tuple, cell))
    submaps = []
    sid = 0
    for cx in range(nx):
        for cy in range(ny):
            if (cx, cy) not in occupied:
                continue
            center_x, center_y = (cx + 0.5) * grid, (cy + 0.5) * grid
            if any(r.contains(center_x, center_y) for r in world.config.hole_regions):
                continue
            sm = render_submap(
                world,
                Pose4(center_x, center_y, 0.0, 0.0),
                radius,
                sid,
                rng=None,
                noise_sigma=0.0,
            )
            submaps.append(sm)
            sid += 1
    return submaps


def _polyline_resample(points: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Points at arc-length intervals along a polyline, with segment headings."""
    seg = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    s_vals = np.arange(0.0, total + 1e-9, spacing)
    s_vals = s_vals[s_vals <= total + 1e-9]
    out = np.empty((len(s_vals), 2))
    yaw = np.empty(len(s_vals))
    for i, s in enumerate(s_vals):
        j = np.searchsorted(cum, s, side="right") - 1
        j = min(j, len(seg) - 1)
        t = (s - cum[j]) / seg_len[j] if seg_len[j] > 0 else 0.0
        out[i] = points[j] + t * seg[j]
        yaw[i] = np.arctan2(seg[j, 1], seg[j, 0])
    return out, yaw


def generate_query(
    world: World,
    trajectory,
    spacing: float = 0.5,
    sensing_radius: float = 20.0,
    noise: tuple[float, float, float, float] | None = None,
    seed: int | None = None,
) -> QuerySequence:
    """Frames along a polyline at fixed arc-length spacing with noisy odometry."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    trajectory = np.asarray(trajectory, dtype=float)
    if trajectory.ndim != 2 or len(trajectory) < 2:
        raise ValueError("trajectory needs at least 2 points")
    if noise is None:
        noise = world.config.odometry_noise
    if seed is None:
        seed = world.config.seed
    noise = np.asarray(noise, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x51]))
    positions, yaws = _polyline_resample(trajectory[:, :2], spacing)
    cov = Cov4(np.diag(noise**2))
    frames = []
    prev_pose = None
    for i, ((x, y), yaw) in enumerate(zip(positions, yaws)):
        pose = Pose4(x, y, 0.0, yaw)
        submap = render_submap(
            world, pose, sensing_radius, submap_id=i,
            rng=rng, noise_sigma=world.config.descriptor_noise_sigma,
        )
        if i == 0:
            odo = Motion(Pose4(), Cov4())
        else:
            true_delta = compose(inverse(prev_pose), pose)
            eps = rng.normal(size=4) * noise
            noisy = Pose4(
                true_delta.x + eps[0],
                true_delta.y + eps[1],
                true_delta.z + eps[2],
                true_delta.yaw + eps[3],
            )
            odo = Motion(noisy, cov)
        frames.append(QueryFrame(true_pose=pose, submap=submap, odometry=odo))
        prev_pose = pose
    return QuerySequence(frames=frames)


# --- JSON serialization -----------------------------------------------------

_SCHEMA_VERSION = 1


def _arr_to_b64(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _arr_from_b64(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(d["shape"]).copy()


def _rect_to_json(r: Rect):
    return [r.x0, r.y0, r.x1, r.y1]


def _cfg_to_json(cfg: WorldConfig) -> dict:
    return {
        "extent": list(cfg.extent),
        "landmark_density": cfg.landmark_density,
        "scarce_regions": [[_rect_to_json(r), d] for r, d in cfg.scarce_regions],
        "hole_regions": [_rect_to_json(r) for r in cfg.hole_regions],
        "descriptor_dim": cfg.descriptor_dim,
        "descriptor_noise_sigma": cfg.descriptor_noise_sigma,
        "odometry_noise": list(cfg.odometry_noise),
        "z_noise": cfg.z_noise,
        "seed": cfg.seed,
    }


def _cfg_from_json(d: dict) -> WorldConfig:
    return WorldConfig(
        extent=tuple(d["extent"]),
        landmark_density=d["landmark_density"],
        scarce_regions=tuple((Rect(*r), dens) for r, dens in d["scarce_regions"]),
        hole_regions=tuple(Rect(*r) for r in d["hole_regions"]),
        descriptor_dim=d["descriptor_dim"],
        descriptor_noise_sigma=d["descriptor_noise_sigma"],
        odometry_noise=tuple(d["odometry_noise"]),
        z_noise=d["z_noise"],
        seed=d["seed"],
    )


def world_to_json(world: World) -> str:
    doc = {
        "schema": "seqloc-world",
        "version": _SCHEMA_VERSION,
        "config": _cfg_to_json(world.config),
        "landmarks": _arr_to_b64(world.landmarks),
        "landmark_ids": world.landmark_ids.tolist(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def world_from_json(text: str) -> World:
    doc = json.loads(text)
    if doc.get("schema") != "seqloc-world":
        raise ValueError("not a world file")
    if doc["version"] != _SCHEMA_VERSION:
        raise ValueError(f"unsupported world schema version {doc['version']}")
    return World(
        landmarks=_arr_from_b64(doc["landmarks"]),
        landmark_ids=np.array(doc["landmark_ids"], dtype=np.int64),
        config=_cfg_from_json(doc["config"]),
    )


def _submap_to_json(sm: Submap) -> dict:
    return {
        "id": sm.id,
        "centroid": sm.centroid.tolist(),
        "keypoints": _arr_to_b64(sm.keypoints),
        "descriptors": _arr_to_b64(sm.descriptors),
        "global_desc": _arr_to_b64(sm.global_desc),
        "source_landmark_ids": sm.source_landmark_ids.tolist(),
    }


def _submap_from_json(d: dict) -> Submap:
    return Submap(
        id=d["id"],
        centroid=np.array(d["centroid"]),
        keypoints=_arr_from_b64(d["keypoints"]),
        descriptors=_arr_from_b64(d["descriptors"]),
        global_desc=_arr_from_b64(d["global_desc"]),
        source_landmark_ids=np.array(d["source_landmark_ids"], dtype=np.int64),
    )


def sequence_to_json(seq: QuerySequence) -> str:
    frames = []
    for f in seq.frames:
        frames.append(
            {
                "true_pose": [f.true_pose.x, f.true_pose.y, f.true_pose.z, f.true_pose.yaw],
                "submap": _submap_to_json(f.submap),
                "odometry": {
                    "delta": [
                        f.odometry.delta.x,
                        f.odometry.delta.y,
                        f.odometry.delta.z,
                        f.odometry.delta.yaw,
                    ],
                    "cov": _arr_to_b64(f.odometry.cov.m),
                },
            }
        )
    doc = {"schema": "seqloc-sequence", "version": _SCHEMA_VERSION, "frames": frames}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def sequence_from_json(text: str) -> QuerySequence:
    doc = json.loads(text)
    if doc.get("schema") != "seqloc-sequence":
        raise ValueError("not a sequence file")
    if doc["version"] != _SCHEMA_VERSION:
        raise ValueError(f"unsupported sequence schema version {doc['version']}")
    frames = []
    for f in doc["frames"]:
        frames.append(
            QueryFrame(
                true_pose=Pose4(*f["true_pose"]),
                submap=_submap_from_json(f["submap"]),
                odometry=Motion(
                    Pose4(*f["odometry"]["delta"]),
                    Cov4(_arr_from_b64(f["odometry"]["cov"])),
                ),
            )
        )
    return QuerySequence(frames=frames)
