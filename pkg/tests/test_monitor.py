import math

import numpy as np
import pytest

from seqloc import mapstore, monitor
from seqloc.geometry import Pose3, Pose4
from seqloc.mcl import MclParams
from seqloc.monitor import (
    PF,
    REG,
    RELIABLE,
    UNRELIABLE,
    StatusThresholds,
    assess,
    reinit_particles,
    run_sequence,
    switch_mode,
)
from seqloc.worldsim import (
    Rect,
    WorldConfig,
    build_prior_map,
    generate_query,
    generate_world,
)

THR = StatusThresholds()
DEG15 = math.radians(15.0)


class TestAssess:
    def test_boundary_equality_is_reliable(self):
        sig = (THR.sigma_x_thr, THR.sigma_y_thr, THR.sigma_yaw_thr)
        assert assess(THR.lambda_thr, sig, THR) == RELIABLE

    def test_zero_lambda_unreliable(self):
        assert assess(0.0, (0.1, 0.1, 0.01), THR) == UNRELIABLE

    def test_sigma_yaw_over_threshold(self):
        sig = (1.0, 1.0, math.radians(16.0))
        assert assess(100.0, sig, THR) == UNRELIABLE

    def test_each_sigma_triggers(self):
        assert assess(100.0, (31.0, 1.0, 0.01), THR) == UNRELIABLE
        assert assess(100.0, (1.0, 31.0, 0.01), THR) == UNRELIABLE

    def test_monotone_in_sigma_and_lambda(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            lam = rng.uniform(0, 10)
            sig = rng.uniform(0.1, 40, size=3)
            sig[2] = rng.uniform(0.01, 0.5)
            base = assess(lam, tuple(sig), THR)
            worse = assess(lam * 0.5, tuple(sig * 1.5), THR)
            if base == UNRELIABLE:
                assert worse == UNRELIABLE

    def test_bad_thresholds_rejected(self):
        with pytest.raises(ValueError):
            StatusThresholds(lambda_thr=0.0)


class TestSwitchMode:
    def test_pf_reliable_enters_reg(self):
        assert switch_mode(PF, RELIABLE) == (REG, False)

    def test_pf_unreliable_stays(self):
        assert switch_mode(PF, UNRELIABLE) == (PF, False)

    def test_reg_unreliable_reinitializes(self):
        assert switch_mode(REG, UNRELIABLE) == (PF, True)

    def test_reg_reliable_stays(self):
        assert switch_mode(REG, RELIABLE) == (REG, False)


class TestReinitParticles:
    def test_floor_engaged_on_tiny_sigma(self):
        rng = np.random.default_rng(0)
        ps = reinit_particles(Pose3(10.0, 20.0, 0.5), (1e-9, 1e-9, 1e-9),
                              alpha=3.0, n=2000, rng=rng)
        # spread is alpha * floor; everything within 6 floor-sigmas of center
        assert np.all(np.abs(ps.xy[:, 0] - 10.0) < 6 * 3.0 * 0.5)
        assert np.all(np.abs(ps.xy[:, 1] - 20.0) < 6 * 3.0 * 0.5)

    def test_sample_std_matches_alpha_sigma(self):
        rng = np.random.default_rng(1)
        sigma = (2.0, 3.0, math.radians(5.0))
        ps = reinit_particles(Pose3(0, 0, 0), sigma, alpha=3.0, n=10_000, rng=rng)
        assert ps.xy[:, 0].std() == pytest.approx(6.0, rel=0.05)
        assert ps.xy[:, 1].std() == pytest.approx(9.0, rel=0.05)
        assert ps.yaw.std() == pytest.approx(3 * math.radians(5.0), rel=0.05)

    def test_weights_peak_at_center(self):
        rng = np.random.default_rng(2)
        sigma = (2.0, 2.0, 0.1)
        star = Pose3(5.0, -5.0, 0.2)
        ps = reinit_particles(star, sigma, alpha=3.0, n=500, rng=rng)
        d = (
            (ps.xy[:, 0] - star.x) ** 2 / sigma[0] ** 2
            + (ps.xy[:, 1] - star.y) ** 2 / sigma[1] ** 2
            + (ps.yaw - star.yaw) ** 2 / sigma[2] ** 2
        )
        assert np.argmax(ps.w) == np.argmin(d)
        assert ps.w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_requires_positive_n(self):
        with pytest.raises(ValueError):
            reinit_particles(Pose3(), (1, 1, 0.1), 3.0, 0, np.random.default_rng(0))


def corridor_world(hole=None, seed=7, density=0.05):
    holes = (Rect(*hole),) if hole else ()
    cfg = WorldConfig(
        extent=(300.0, 60.0),
        landmark_density=density,
        hole_regions=holes,
        descriptor_noise_sigma=0.0,
        seed=seed,
    )
    return generate_world(cfg)


def corridor_seq(world, noise=(0.02, 0.02, 0.0, 0.002), spacing=2.0, seed=None):
    traj = np.array([[20.0, 30.0], [280.0, 30.0]])
    return generate_query(world, traj, spacing=spacing, noise=noise, seed=seed)


@pytest.fixture(scope="module")
def rich_world():
    return corridor_world()


@pytest.fixture(scope="module")
def rich_map(rich_world):
    # render map submaps at the query sensing radius so global descriptors
    # of query and map describe the same neighborhood
    return mapstore.build(build_prior_map(rich_world, radius=20.0), grid=5.0)


@pytest.fixture(scope="module")
def rich_seq(rich_world):
    return corridor_seq(rich_world)


def errors_xy(records):
    e = np.array(records)
    est = np.array([r["est_pose"][:2] for r in records])
    tru = np.array([r["true_pose"][:2] for r in records])
    return np.linalg.norm(est - tru, axis=1)


TEST_PARAMS = MclParams(n_init=4000, n_conv=400)


class TestRegOnly:
    def test_noiseless_closed_loop_tracks_truth(self, rich_world, rich_map):
        seq = corridor_seq(rich_world, noise=(0.0, 0.0, 0.0, 0.0))
        init = seq.frames[0].true_pose
        records = run_sequence(rich_map, seq, method="reg",
                               params=TEST_PARAMS, seed=0, init_pose=init)
        pe = errors_xy(records)
        assert np.all(pe < 0.1)

    def test_requires_init_pose(self, rich_map, rich_seq):
        with pytest.raises(ValueError):
            run_sequence(rich_map, rich_seq, method="reg", params=TEST_PARAMS)

    def test_sigma_grows_during_pure_dead_reckoning(self, rich_map):
        # a sequence through nothing but holes: no correspondences at all
        hole_world = corridor_world(hole=(0.0, 0.0, 300.0, 60.0), density=0.0)
        # prior map must come from a non-empty world; reuse rich_map and run
        # the empty-scene frames far outside it
        seq = corridor_seq(hole_world)
        init = Pose4(1e5, 1e5, 0.0, 0.0)
        records = run_sequence(rich_map, seq, method="reg",
                               params=TEST_PARAMS, seed=0, init_pose=init)
        sig = np.array([r["sigma"][:2] for r in records], dtype=float)
        assert np.all(np.diff(sig[:, 0]) >= -1e-12)
        assert np.all(r["status"] == "unreliable" for r in records)


class TestReliablePipeline:
    def test_converges_and_prefers_reg(self, rich_map, rich_seq):
        records = run_sequence(rich_map, rich_seq, method="reliable",
                               params=TEST_PARAMS, seed=1)
        conv = [r for r in records if r["converged"]]
        assert conv, "never converged"
        reg_frac = sum(r["mode"] == REG for r in conv) / len(conv)
        assert reg_frac >= 0.8
        pe = errors_xy(conv)
        assert np.median(pe) < 2.0

    def test_mode_automaton_invariants(self, rich_map, rich_seq):
        records = run_sequence(rich_map, rich_seq, method="reliable",
                               params=TEST_PARAMS, seed=2)
        for prev, cur in zip(records, records[1:]):
            if prev["mode"] == PF and cur["mode"] == REG:
                assert cur["status"] == RELIABLE
            if cur["mode"] == REG:
                assert cur["converged"]

    def test_hole_triggers_fallback_to_pf(self):
        world = corridor_world(hole=(120.0, 0.0, 200.0, 60.0))
        idx = mapstore.build(build_prior_map(world, radius=20.0), grid=5.0)
        seq = corridor_seq(world)
        records = run_sequence(idx, seq, method="reliable",
                               params=TEST_PARAMS, seed=3)
        in_hole = [r for r in records
                   if 125.0 < r["true_pose"][0] < 200.0 and r["converged"]]
        assert in_hole, "sequence never crossed the hole after convergence"
        assert any(r["mode"] == PF for r in in_hole)
        # bounded error through the outage, unlike open-loop drift
        pe = errors_xy(in_hole)
        assert np.max(pe) < 30.0

    def test_trace_determinism(self, rich_map, rich_seq):
        a = run_sequence(rich_map, rich_seq, method="reliable",
                         params=TEST_PARAMS, seed=5)
        b = run_sequence(rich_map, rich_seq, method="reliable",
                         params=TEST_PARAMS, seed=5)
        for ra, rb in zip(a, b):
            ka = {k: v for k, v in ra.items() if k != "wall_time_ms"}
            kb = {k: v for k, v in rb.items() if k != "wall_time_ms"}
            assert ka == kb

    def test_unknown_method_rejected(self, rich_map, rich_seq):
        with pytest.raises(ValueError):
            run_sequence(rich_map, rich_seq, method="magic", params=TEST_PARAMS)


class TestVariants:
    def test_pf_variants_never_enter_reg(self, rich_map, rich_seq):
        for method in ("pf", "pf-sgv", "pf-sgv2"):
            records = run_sequence(rich_map, rich_seq, method=method,
                                   params=TEST_PARAMS, seed=4)
            assert all(r["mode"] == PF for r in records)

    def test_pf_sgv2_converges(self, rich_map, rich_seq):
        records = run_sequence(rich_map, rich_seq, method="pf-sgv2",
                               params=TEST_PARAMS, seed=0)
        conv = [r for r in records if r["converged"]]
        assert conv
        pe = errors_xy(conv)
        assert np.median(pe) < 5.0
