import numpy as np
import pytest

from seqloc.geometry import Pose4, apply, wrap_angle
from seqloc.registration import (
    DegenerateFitError,
    UnobservablePoseError,
    fit_pose3,
    fit_pose4,
    jacobian,
    pose_uncertainty,
)


def transformed_pairs(rng, pose, n=10, spread=10.0):
    q = rng.uniform(-spread, spread, size=(n, 3))
    m = apply(pose, q)
    return q, m


class TestFitPose3:
    def test_identity(self):
        rng = np.random.default_rng(0)
        q, m = transformed_pairs(rng, Pose4())
        r = fit_pose3(q, m)
        assert r.pose.x == pytest.approx(0.0, abs=1e-12)
        assert r.pose.y == pytest.approx(0.0, abs=1e-12)
        assert r.pose.yaw == pytest.approx(0.0, abs=1e-12)
        assert r.rms_residual == pytest.approx(0.0, abs=1e-10)

    def test_recovers_ground_truth(self):
        rng = np.random.default_rng(1)
        truth = Pose4(2.0, -1.0, 0.0, 0.7)
        q, m = transformed_pairs(rng, truth)
        r = fit_pose3(q, m)
        assert r.pose.x == pytest.approx(2.0, abs=1e-9)
        assert r.pose.y == pytest.approx(-1.0, abs=1e-9)
        assert r.pose.yaw == pytest.approx(0.7, abs=1e-9)

    def test_too_few_pairs(self):
        with pytest.raises(DegenerateFitError):
            fit_pose3(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_degenerate_coincident_points(self):
        q = np.zeros((5, 3))
        m = np.zeros((5, 3))
        with pytest.raises(DegenerateFitError):
            fit_pose3(q, m)

    def test_noisy_fit_is_local_optimum(self):
        # perturbation oracle: no random pose perturbation beats the fit's SSE
        rng = np.random.default_rng(2)
        truth = Pose4(1.0, 2.0, 0.0, -0.4)
        q, m = transformed_pairs(rng, truth, n=30)
        m = m + rng.normal(0, 0.05, size=m.shape)
        r = fit_pose3(q, m)

        def sse(x, y, yaw):
            res = apply(Pose4(x, y, 0, yaw), q)[:, :2] - m[:, :2]
            return float(np.sum(res**2))

        best = sse(r.pose.x, r.pose.y, r.pose.yaw)
        for _ in range(1000):
            d = rng.normal(0, 0.02, size=3)
            assert best <= sse(r.pose.x + d[0], r.pose.y + d[1], r.pose.yaw + d[2]) + 1e-12

    def test_global_optimum_against_random_poses(self):
        rng = np.random.default_rng(3)
        truth = Pose4(-3.0, 0.5, 0.0, 2.5)
        q, m = transformed_pairs(rng, truth, n=20)
        m = m + rng.normal(0, 0.1, size=m.shape)
        r = fit_pose3(q, m)

        def sse(x, y, yaw):
            res = apply(Pose4(x, y, 0, yaw), q)[:, :2] - m[:, :2]
            return float(np.sum(res**2))

        best = sse(r.pose.x, r.pose.y, r.pose.yaw)
        for _ in range(10_000):
            x, y = rng.uniform(-10, 10, size=2)
            yaw = rng.uniform(-np.pi, np.pi)
            assert best <= sse(x, y, yaw) + 1e-9

    def test_translation_equivariance(self):
        rng = np.random.default_rng(4)
        q, m = transformed_pairs(rng, Pose4(1.0, -2.0, 0.0, 0.3), n=12)
        m = m + rng.normal(0, 0.05, size=m.shape)
        base = fit_pose3(q, m)
        offset = np.array([5.0, -7.0, 0.0])
        shifted = fit_pose3(q, m + offset)
        assert shifted.pose.x == pytest.approx(base.pose.x + 5.0, abs=1e-10)
        assert shifted.pose.y == pytest.approx(base.pose.y - 7.0, abs=1e-10)
        assert shifted.pose.yaw == pytest.approx(base.pose.yaw, abs=1e-10)


class TestFitPose4:
    def test_identity_pairs(self):
        rng = np.random.default_rng(5)
        q, m = transformed_pairs(rng, Pose4())
        r = fit_pose4(q, m)
        assert r.pose.z == pytest.approx(0.0, abs=1e-12)
        assert r.pose.x == pytest.approx(0.0, abs=1e-10)

    def test_recovers_ground_truth_4dof(self):
        rng = np.random.default_rng(6)
        truth = Pose4(1.0, 2.0, 0.5, -0.3)
        q, m = transformed_pairs(rng, truth)
        r = fit_pose4(q, m)
        assert r.pose.x == pytest.approx(1.0, abs=1e-9)
        assert r.pose.y == pytest.approx(2.0, abs=1e-9)
        assert r.pose.z == pytest.approx(0.5, abs=1e-9)
        assert r.pose.yaw == pytest.approx(-0.3, abs=1e-9)

    def test_covariance_scales_with_duplication(self):
        rng = np.random.default_rng(7)
        q, m = transformed_pairs(rng, Pose4(0.5, 0.5, 0.1, 0.2), n=8)
        r1 = fit_pose4(q, m)
        k = 4
        rk = fit_pose4(np.tile(q, (k, 1)), np.tile(m, (k, 1)))
        assert np.allclose(rk.cov.m, r1.cov.m / k, atol=1e-9)
        assert rk.pose.x == pytest.approx(r1.pose.x, abs=1e-9)
        assert rk.pose.yaw == pytest.approx(r1.pose.yaw, abs=1e-9)

    def test_sigma_matches_cov_diagonal(self):
        rng = np.random.default_rng(8)
        q, m = transformed_pairs(rng, Pose4(1, 1, 0, 0.1))
        r = fit_pose4(q, m)
        d = np.sqrt(np.diag(r.cov.m))
        assert r.sigma == pytest.approx((d[0], d[1], d[3]))


class TestJacobian:
    def test_origin_pair_unobservable_yaw_column(self):
        j = jacobian(np.zeros((1, 3)), Pose4(yaw=0.3))
        assert np.all(j[:, 3] == 0.0)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            q = rng.uniform(-10, 10, size=(5, 3))
            pose = Pose4(*rng.uniform(-3, 3, size=3), rng.uniform(-3, 3))
            m = rng.uniform(-10, 10, size=(5, 3))
            j = jacobian(q, pose)

            def residuals(p):
                return (apply(p, q) - m).ravel()

            eps = 1e-6
            for col, d in enumerate(np.eye(4) * eps):
                pp = Pose4(pose.x + d[0], pose.y + d[1], pose.z + d[2], pose.yaw + d[3])
                pm = Pose4(pose.x - d[0], pose.y - d[1], pose.z - d[2], pose.yaw - d[3])
                fd = (residuals(pp) - residuals(pm)) / (2 * eps)
                assert np.max(np.abs(j[:, col] - fd)) < 1e-6

    def test_yaw_column_scales_linearly(self):
        rng = np.random.default_rng(10)
        q = rng.uniform(-5, 5, size=(6, 3))
        pose = Pose4(yaw=0.8)
        n1 = np.linalg.norm(jacobian(q, pose)[:, 3])
        n3 = np.linalg.norm(jacobian(3.0 * q, pose)[:, 3])
        assert n3 == pytest.approx(3.0 * n1, abs=1e-9)


class TestPoseUncertainty:
    def test_coincident_points_unobservable(self):
        j = jacobian(np.zeros((4, 3)), Pose4())
        with pytest.raises(UnobservablePoseError) as e:
            pose_uncertainty(j)
        assert e.value.lambda_min == 0.0

    def test_square_symmetry(self):
        pts = np.array(
            [[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0]]
        )
        j = jacobian(pts, Pose4())
        cov, sigma, _ = pose_uncertainty(j)
        assert cov.m[0, 0] == pytest.approx(cov.m[1, 1], abs=1e-12)
        assert sigma[0] == pytest.approx(sigma[1], abs=1e-12)

    def test_lambda_min_matches_dense_eigensolver(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            j = rng.standard_normal((15, 4))
            _, _, lam = pose_uncertainty(j)
            oracle = float(np.min(np.linalg.eigvalsh(j.T @ j)))
            assert lam == pytest.approx(oracle, abs=1e-9)

    def test_invariant_to_row_permutation(self):
        rng = np.random.default_rng(12)
        j = rng.standard_normal((12, 4))
        cov1, _, lam1 = pose_uncertainty(j)
        perm = rng.permutation(12)
        cov2, _, lam2 = pose_uncertainty(j[perm])
        assert np.allclose(cov1.m, cov2.m, atol=1e-12)
        assert lam1 == pytest.approx(lam2, abs=1e-12)

    def test_adding_pairs_shrinks_cov_diagonal(self):
        rng = np.random.default_rng(13)
        truth = Pose4(0.3, -0.2, 0.0, 0.15)
        q, m = transformed_pairs(rng, truth, n=40)
        prev = None
        for n in (5, 10, 20, 40):
            r = fit_pose4(q[:n], m[:n])
            d = np.diag(r.cov.m)
            if prev is not None:
                assert np.all(d <= prev + 1e-12)
            prev = d
