"""Read-only spatial index over prior-map submaps with single-file persistence.

Nearest-submap queries answer by centroid distance with a search cap r_max;
absence (a map hole) is returned as None, not raised. Ties break toward the
lowest submap id so queries are deterministic.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .worldsim import Submap

__all__ = ["MapIndex", "MapFormatError", "build", "save", "load"]

MAGIC = b"SQLMAP01"
FORMAT_VERSION = 1

# beyond one and a half map cells a "closest submap" is meaningless
DEFAULT_R_MAX_FACTOR = 1.5


class MapFormatError(ValueError):
    """Raised for corrupt or version-incompatible map files."""


@dataclass
class MapIndex:
    submaps: list[Submap]
    grid: float = 5.0
    _cells: dict = field(default_factory=dict, repr=False)
    _centroids: np.ndarray = field(default=None, repr=False)
    _tree: cKDTree = field(default=None, repr=False)
    _global_descs: np.ndarray = field(default=None, repr=False)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        c = self._centroids
        return (
            float(c[:, 0].min()),
            float(c[:, 1].min()),
            float(c[:, 0].max()),
            float(c[:, 1].max()),
        )

    @property
    def r_max_default(self) -> float:
        return DEFAULT_R_MAX_FACTOR * self.grid

    @property
    def centroids(self) -> np.ndarray:
        return self._centroids

    @property
    def global_descs(self) -> np.ndarray:
        return self._global_descs

    def _cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(np.floor(x / self.grid)), int(np.floor(y / self.grid)))

    def nearest(self, x: float, y: float, r_max: float | None = None):
        """Closest submap by centroid distance, or None beyond r_max.

        Exact grid ring search; ties break to the lowest submap id.
        """
        if r_max is None:
            r_max = self.r_max_default
        if r_max <= 0:
            raise ValueError("r_max must be positive")
        cx, cy = self._cell_of(x, y)
        max_ring = int(np.ceil(r_max / self.grid)) + 1
        best = None  # (dist, id, index)
        for ring in range(max_ring + 1):
            # once a candidate is found, closer ones can only sit in rings
            # whose nearest edge is within the current best distance
            if best is not None and (ring - 1) * self.grid > best[0]:
                break
            for gx in range(cx - ring, cx + ring + 1):
                for gy in range(cy - ring, cy + ring + 1):
                    if max(abs(gx - cx), abs(gy - cy)) != ring:
                        continue
                    for i in self._cells.get((gx, gy), ()):
                        sm = self.submaps[i]
                        d = float(np.hypot(sm.centroid[0] - x, sm.centroid[1] - y))
                        cand = (d, sm.id, i)
                        if best is None or cand < best:
                            best = cand
        if best is None or best[0] > r_max:
            return None
        return self.submaps[best[2]]

    def nearest_many(self, xy: np.ndarray, r_max: float | None = None) -> np.ndarray:
        """Vectorized nearest lookup; returns submap indices, -1 for holes."""
        if r_max is None:
            r_max = self.r_max_default
        d, idx = self._tree.query(np.asarray(xy, dtype=float))
        idx = np.asarray(idx, dtype=int)
        return np.where(d <= r_max, idx, -1)


def build(submaps: list[Submap], grid: float = 5.0) -> MapIndex:
    if not submaps:
        raise ValueError("empty submap list")
    idx = MapIndex(submaps=list(submaps), grid=grid)
    idx._centroids = np.array([s.centroid[:2] for s in submaps])
    for i, s in enumerate(submaps):
        idx._cells.setdefault(idx._cell_of(s.centroid[0], s.centroid[1]), []).append(i)
    idx._tree = cKDTree(idx._centroids)
    dim = submaps[0].global_desc.shape[0]
    idx._global_descs = np.array([s.global_desc for s in submaps]).reshape(-1, dim)
    return idx


def _submap_header(sm: Submap) -> dict:
    return {
        "id": sm.id,
        "centroid": sm.centroid.tolist(),
        "n_keypoints": int(sm.n_keypoints),
        "dim": int(sm.descriptors.shape[1]) if sm.descriptors.ndim == 2 else 0,
        "source_landmark_ids": sm.source_landmark_ids.tolist(),
    }


def save(idx: MapIndex, path) -> None:
    """Single-file layout: magic, version, JSON header, then raw float64 arrays
    (keypoints, descriptors, global descriptor per submap, in header order)."""
    header = {
        "grid": idx.grid,
        "n_submaps": len(idx.submaps),
        "submaps": [_submap_header(s) for s in idx.submaps],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for s in idx.submaps:
            f.write(np.ascontiguousarray(s.keypoints, dtype=np.float64).tobytes())
            f.write(np.ascontiguousarray(s.descriptors, dtype=np.float64).tobytes())
            f.write(np.ascontiguousarray(s.global_desc, dtype=np.float64).tobytes())


def load(path) -> MapIndex:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise MapFormatError(f"bad magic bytes {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise MapFormatError(f"unsupported map format version {version}")
        try:
            header = json.loads(f.read(hlen))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise MapFormatError(f"corrupt header: {e}") from e
        submaps = []
        for rec in header["submaps"]:
            k, dim = rec["n_keypoints"], rec["dim"]
            kp = np.frombuffer(f.read(8 * 3 * k), dtype=np.float64).reshape(k, 3).copy()
            de = np.frombuffer(f.read(8 * dim * k), dtype=np.float64).reshape(k, dim).copy()
            gd = np.frombuffer(f.read(8 * dim), dtype=np.float64).copy()
            if len(gd) != dim:
                raise MapFormatError("truncated map file")
            submaps.append(
                Submap(
                    id=rec["id"],
                    centroid=np.array(rec["centroid"]),
                    keypoints=kp,
                    descriptors=de,
                    global_desc=gd,
                    source_landmark_ids=np.array(rec["source_landmark_ids"], dtype=np.int64),
                )
            )
    return build(submaps, grid=header["grid"])
