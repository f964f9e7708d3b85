import hashlib

import numpy as np
import pytest

from seqloc import mapstore
from seqloc.worldsim import Submap


def make_submap(sid, x, y, n_kp=4, dim=8, seed=0):
    rng = np.random.default_rng(seed + sid)
    descs = rng.standard_normal((n_kp, dim))
    descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    g = descs.mean(axis=0)
    g /= np.linalg.norm(g)
    return Submap(
        id=sid,
        centroid=np.array([x, y, 0.0]),
        keypoints=rng.uniform(-5, 5, size=(n_kp, 3)),
        descriptors=descs,
        global_desc=g,
        source_landmark_ids=np.arange(n_kp, dtype=np.int64),
    )


class TestBuild:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mapstore.build([])

    def test_single_submap(self):
        idx = mapstore.build([make_submap(0, 2.5, 2.5)])
        assert idx.nearest(100.0, 100.0, r_max=1000.0).id == 0
        assert idx.bounds == (2.5, 2.5, 2.5, 2.5)

    def test_four_cells(self):
        subs = [
            make_submap(0, 2.5, 2.5),
            make_submap(1, 7.5, 2.5),
            make_submap(2, 2.5, 7.5),
            make_submap(3, 7.5, 7.5),
        ]
        idx = mapstore.build(subs, grid=5.0)
        assert idx.nearest(1.0, 1.0).id == 0
        assert idx.nearest(8.0, 1.0).id == 1
        assert idx.nearest(1.0, 9.0).id == 2
        assert idx.nearest(9.0, 9.0).id == 3


class TestNearest:
    def test_probe_at_centroid(self):
        subs = [make_submap(i, 5.0 * i + 2.5, 2.5) for i in range(5)]
        idx = mapstore.build(subs)
        assert idx.nearest(12.5, 2.5).id == 2

    def test_hole_returns_none(self):
        subs = [make_submap(0, 2.5, 2.5)]
        idx = mapstore.build(subs)
        assert idx.nearest(50.0, 2.5, r_max=7.5) is None

    def test_tie_breaks_to_lowest_id(self):
        subs = [make_submap(5, 0.0, 0.0), make_submap(2, 10.0, 0.0)]
        idx = mapstore.build(subs)
        assert idx.nearest(5.0, 0.0, r_max=100.0).id == 2

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(3)
        subs = [
            make_submap(i, rng.uniform(0, 200), rng.uniform(0, 100))
            for i in range(300)
        ]
        idx = mapstore.build(subs, grid=5.0)
        centroids = np.array([s.centroid[:2] for s in subs])
        for _ in range(500):
            x, y = rng.uniform(-20, 220), rng.uniform(-20, 120)
            r_max = rng.uniform(1.0, 40.0)
            d = np.hypot(centroids[:, 0] - x, centroids[:, 1] - y)
            best = int(np.argmin(d))
            got = idx.nearest(x, y, r_max=r_max)
            if d[best] > r_max:
                assert got is None
            else:
                assert got.id == subs[best].id

    def test_nearest_many_agrees_with_scalar(self):
        rng = np.random.default_rng(4)
        subs = [
            make_submap(i, rng.uniform(0, 100), rng.uniform(0, 50))
            for i in range(100)
        ]
        idx = mapstore.build(subs)
        probes = rng.uniform(0, 100, size=(200, 2))
        batch = idx.nearest_many(probes, r_max=10.0)
        for k, (x, y) in enumerate(probes):
            got = idx.nearest(x, y, r_max=10.0)
            if batch[k] == -1:
                assert got is None
            else:
                assert got.id == subs[batch[k]].id


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        subs = [
            make_submap(i, rng.uniform(0, 100), rng.uniform(0, 50))
            for i in range(20)
        ]
        idx = mapstore.build(subs, grid=5.0)
        path = tmp_path / "map.bin"
        mapstore.save(idx, path)
        idx2 = mapstore.load(path)
        assert len(idx2.submaps) == len(idx.submaps)
        assert idx2.grid == idx.grid
        for a, b in zip(idx.submaps, idx2.submaps):
            assert a.id == b.id
            assert np.array_equal(a.centroid, b.centroid)

    def test_descriptor_bits_preserved(self, tmp_path):
        subs = [make_submap(i, 5.0 * i, 0.0) for i in range(10)]
        idx = mapstore.build(subs)
        path = tmp_path / "map.bin"
        mapstore.save(idx, path)
        idx2 = mapstore.load(path)
        h1 = hashlib.sha256(
            b"".join(s.descriptors.tobytes() for s in idx.submaps)
        ).hexdigest()
        h2 = hashlib.sha256(
            b"".join(s.descriptors.tobytes() for s in idx2.submaps)
        ).hexdigest()
        assert h1 == h2

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTAMAP!" + b"\x00" * 64)
        with pytest.raises(mapstore.MapFormatError):
            mapstore.load(path)

    def test_version_mismatch(self, tmp_path):
        idx = mapstore.build([make_submap(0, 0.0, 0.0)])
        path = tmp_path / "map.bin"
        mapstore.save(idx, path)
        raw = bytearray(path.read_bytes())
        raw[8] = 99  # bump version field
        path.write_bytes(bytes(raw))
        with pytest.raises(mapstore.MapFormatError):
            mapstore.load(path)

    def test_load_save_query_equivalent(self, tmp_path):
        rng = np.random.default_rng(6)
        subs = [
            make_submap(i, rng.uniform(0, 50), rng.uniform(0, 50))
            for i in range(30)
        ]
        idx = mapstore.build(subs)
        path = tmp_path / "map.bin"
        mapstore.save(idx, path)
        idx2 = mapstore.load(path)
        for _ in range(100):
            x, y = rng.uniform(0, 50, size=2)
            a = idx.nearest(x, y, r_max=20.0)
            b = idx2.nearest(x, y, r_max=20.0)
            assert (a is None) == (b is None)
            if a is not None:
                assert a.id == b.id
