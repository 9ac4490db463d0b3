import math

import numpy as np
import pytest

from g3dm import geometry3d as g3
from g3dm.geometry3d import GeometryError, GradientGrid, Minutia2D, Pose, Template3D
from helpers import hemisphere_grid


class TestOrientation:
    def test_flat_surface_stays_in_plane(self):
        s = g3.solve_3d_orientation(1.0, (0.0, 0.0))
        assert s.phi == pytest.approx(math.pi / 2)
        np.testing.assert_allclose(s.unit(), [math.cos(1.0), math.sin(1.0), 0.0], atol=1e-15)

    def test_unit_slope(self):
        s = g3.solve_3d_orientation(0.0, (1.0, 0.0))
        assert s.phi == pytest.approx(3 * math.pi / 4)
        d = s.unit()
        np.testing.assert_allclose(d, [math.sqrt(0.5), 0.0, -math.sqrt(0.5)], atol=1e-15)
        assert abs(d @ [1.0, 0.0, 1.0]) < 1e-15

    def test_orthogonal_gradient(self):
        s = g3.solve_3d_orientation(math.pi / 2, (1.0, 0.0))
        assert s.phi == pytest.approx(math.pi / 2)
        np.testing.assert_allclose(s.unit(), [0.0, 1.0, 0.0], atol=1e-15)

    def test_random_cases_residual_and_projection(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            th = rng.uniform(0, 2 * math.pi)
            g = rng.normal(scale=2.0, size=2)
            o = g3.scale_orientation(g3.solve_3d_orientation(th, g))
            assert abs(o @ [g[0], g[1], 1.0]) <= 1e-9
            # xy part points along theta
            assert o[0] * math.cos(th) + o[1] * math.sin(th) > 0
            assert abs(o[0] * math.sin(th) - o[1] * math.cos(th)) <= 1e-9
            assert abs(np.linalg.norm(o) - 25.0) <= 1e-6

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(4)
        th = rng.uniform(0, 6.3, 50)
        gx, gy = rng.normal(size=(2, 50))
        got = g3.solve_3d_orientation_batch(th, gx, gy)
        want = np.array([g3.solve_3d_orientation(t, (a, b)).unit() for t, a, b in zip(th, gx, gy)])
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            g3.solve_3d_orientation(float("nan"), (0.0, 0.0))


class TestScaleOrientation:
    def test_equator(self):
        np.testing.assert_allclose(g3.scale_orientation(g3.SphericalOrientation(0.0, math.pi / 2)), [25, 0, 0], atol=1e-12)

    def test_pole(self):
        for th in (0.0, 1.3, 4.0):
            np.testing.assert_allclose(g3.scale_orientation(g3.SphericalOrientation(th, 0.0)), [0, 0, 25], atol=1e-12)

    def test_diagonal(self):
        o = g3.scale_orientation(g3.SphericalOrientation(math.pi / 4, math.pi / 4))
        np.testing.assert_allclose(o, [12.5, 12.5, 25 * math.sqrt(0.5)], atol=1e-12)
        assert np.linalg.norm(o) == pytest.approx(25.0)

    def test_bad_alpha(self):
        with pytest.raises(GeometryError):
            g3.scale_orientation(g3.SphericalOrientation(0, 0), alpha=-1)


class TestDepth:
    def test_plane_is_exact(self):
        n = 32
        grid = GradientGrid(np.full((n, n), 0.1), np.full((n, n), -0.2), np.ones((n, n), bool))
        d = g3.integrate_depth(grid)
        jj, ii = np.mgrid[0:n, 0:n]
        want = 0.1 * ii - 0.2 * jj
        want -= want.mean()
        assert np.sqrt(np.mean((d.z - want) ** 2)) < 1e-9

    def test_plane_with_scale_and_ragged_mask(self):
        n = 40
        jj, ii = np.mgrid[0:n, 0:n]
        mask = (ii - 20) ** 2 + (jj - 18) ** 2 < 250
        grid = GradientGrid(np.full((n, n), 0.3), np.full((n, n), 0.05), mask, scale=2.5)
        d = g3.integrate_depth(grid)
        want = 2.5 * (0.3 * ii + 0.05 * jj)
        want = want - want[mask].mean()
        assert np.abs(d.z[mask] - want[mask]).max() < 1e-9

    def test_hemisphere(self):
        grid, z = hemisphere_grid()
        d = g3.integrate_depth(grid)
        m = grid.mask
        err = d.z[m] - z[m]
        err -= err.mean()
        assert np.sqrt(np.mean(err**2)) <= 2.0

    def test_empty_mask(self):
        with pytest.raises(GeometryError):
            GradientGrid(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))

    def test_two_components_rejected(self):
        mask = np.zeros((5, 5), bool)
        mask[0, 0] = mask[4, 4] = True
        with pytest.raises(GeometryError):
            g3.integrate_depth(GradientGrid(np.zeros((5, 5)), np.zeros((5, 5)), mask))


class TestLift:
    def test_flat_plateau(self):
        n = 16
        grid = GradientGrid(np.zeros((n, n)), np.zeros((n, n)), np.ones((n, n), bool))
        depth = g3.DepthGrid(np.full((n, n), 10.0), np.ones((n, n), bool))
        m = g3.lift_minutia(Minutia2D(5.2, 7.7, 0.4), grid, depth)
        np.testing.assert_allclose(m.p, [5.2, 7.7, 10.0])
        assert abs(m.o[2]) < 1e-12
        assert np.linalg.norm(m.o) == pytest.approx(25.0)

    def test_hemisphere_orthogonal_to_printed_normal(self):
        grid, _ = hemisphere_grid()
        depth = g3.integrate_depth(grid)
        rng = np.random.default_rng(0)
        for _ in range(30):
            x, y = rng.uniform(-120, 120, 2)
            m = Minutia2D(x, y, rng.uniform(0, 6.28))
            lm = g3.lift_minutia(m, grid, depth)
            gx = g3.sample_bilinear(grid, grid.g_x, x, y)
            gy = g3.sample_bilinear(grid, grid.g_y, x, y)
            assert abs(lm.o @ [gx, gy, 1.0]) < 1e-9

    def test_surface_mode_is_tangent(self):
        grid, _ = hemisphere_grid()
        depth = g3.integrate_depth(grid)
        m = Minutia2D(60.0, -40.0, 0.7)
        lm = g3.lift_minutia(m, grid, depth, normal="surface")
        gx = g3.sample_bilinear(grid, grid.g_x, 60.0, -40.0)
        gy = g3.sample_bilinear(grid, grid.g_y, 60.0, -40.0)
        assert abs(lm.o @ [-gx, -gy, 1.0]) < 1e-9
        printed = g3.lift_minutia(m, grid, depth)
        np.testing.assert_allclose(printed.o[:2], lm.o[:2], atol=1e-12)
        assert printed.o[2] == pytest.approx(-lm.o[2])

    def test_unknown_normal_mode(self):
        with pytest.raises(ValueError):
            g3.spherical_lift_array([0.0], [0.0], [0.0], normal="inward")

    def test_off_mask(self):
        n = 8
        grid = GradientGrid(np.zeros((n, n)), np.zeros((n, n)), np.ones((n, n), bool))
        depth = g3.integrate_depth(grid)
        with pytest.raises(GeometryError):
            g3.lift_minutia(Minutia2D(8.6, 3.0, 0.0), grid, depth)
        rows, kept = g3.lift_minutiae(
            [Minutia2D(1, 1, 0), Minutia2D(-1.2, 3, 0), Minutia2D(2, 2, 1)], grid, depth, drop_off_mask=True
        )
        assert kept == [0, 2] and rows.shape == (2, 6)


class TestSphere:
    def test_centre_point(self):
        ms = [Minutia2D(0, 0, 0), Minutia2D(300, 0, 0)]
        out = g3.spherical_lift(ms)
        assert out[0].p[2] == pytest.approx(400.0)
        assert out[1].p[2] == pytest.approx(math.sqrt(70000))

    def test_single_minutia(self):
        assert g3.spherical_lift([Minutia2D(0, 0, 1.0)])[0].p[2] == pytest.approx(math.sqrt(70000))

    def test_all_on_sphere(self):
        rng = np.random.default_rng(1)
        x, y = rng.uniform(-250, 250, (2, 80))
        rows = g3.spherical_lift_array(x, y, rng.uniform(0, 6.28, 80))
        r2 = (x * x + y * y).max() + 70000
        np.testing.assert_allclose((rows[:, :3] ** 2).sum(1), r2, rtol=0, atol=1e-6 * r2)

    def test_surface_mode_tangent_to_sphere(self):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(-250, 250, (2, 40))
        rows = g3.spherical_lift_array(x, y, rng.uniform(0, 6.28, 40), normal="surface")
        radial = rows[:, :3] / np.linalg.norm(rows[:, :3], axis=1, keepdims=True)
        assert np.abs((rows[:, 3:] * radial).sum(1)).max() < 1e-9

    def test_empty(self):
        with pytest.raises(GeometryError):
            g3.spherical_lift([])


class TestRigid:
    def test_identity(self):
        np.testing.assert_array_equal(g3.rotation_from_euler((0, 0, 0)), np.eye(3))

    def test_first_factor_turns_xy_plane(self):
        r = g3.rotation_from_euler((math.pi / 2, 0, 0))
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_product_oracle(self):
        th, ps, ph = math.pi / 6, math.pi / 4, math.pi / 3
        rx = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
        ry = np.array([[math.cos(ps), 0, -math.sin(ps)], [0, 1, 0], [math.sin(ps), 0, math.cos(ps)]])
        rz = np.array([[1, 0, 0], [0, math.cos(ph), -math.sin(ph)], [0, math.sin(ph), math.cos(ph)]])
        want = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                want[i, j] = sum(rz[i, a] * ry[a, b] * rx[b, j] for a in range(3) for b in range(3))
        np.testing.assert_allclose(g3.rotation_from_euler((th, ps, ph)), want, atol=1e-12)

    def test_factor_derivatives(self):
        e = np.array([0.3, -0.7, 1.1])
        h = 1e-6
        d = g3.euler_factor_derivatives(e)
        for k in range(3):
            step = np.zeros(3)
            step[k] = h
            fd = (g3.euler_factors(e + step)[k] - g3.euler_factors(e - step)[k]) / (2 * h)
            np.testing.assert_allclose(d[k], fd, atol=1e-8)

    def _tpl(self, n=12, seed=0):
        rng = np.random.default_rng(seed)
        o = rng.normal(size=(n, 3))
        o *= 25 / np.linalg.norm(o, axis=1, keepdims=True)
        return Template3D("t", "f", "front", np.hstack([rng.normal(scale=50, size=(n, 3)), o]))

    def test_identity_pose_bitwise(self):
        t = self._tpl()
        np.testing.assert_array_equal(g3.apply_pose(t, Pose()).minutiae, t.minutiae)

    def test_translation_rotate_only(self):
        t = self._tpl()
        out = g3.apply_pose(t, Pose(t=(10, 0, 0)), "rotate-only")
        np.testing.assert_allclose(out.positions - t.positions, np.tile([10, 0, 0], (len(t), 1)))
        np.testing.assert_array_equal(out.orientations, t.orientations)

    def test_translation_as_printed_shifts_orientation(self):
        t = self._tpl()
        out = g3.apply_pose(t, Pose(t=(10, 0, 0)))
        np.testing.assert_allclose(out.orientations - t.orientations, np.tile([10, 0, 0], (len(t), 1)))

    def test_rigidity(self):
        rng = np.random.default_rng(5)
        t = self._tpl(20, 1)
        pose = Pose(t=tuple(rng.normal(size=3) * 30), euler=tuple(rng.uniform(-3, 3, 3)))
        out = g3.apply_pose(t, pose, "rotate-only")

        def dists(p):
            return np.linalg.norm(p[:, None] - p[None], axis=-1)

        np.testing.assert_allclose(dists(out.positions), dists(t.positions), atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(out.orientations, axis=1), 25.0, atol=1e-9)

    def test_2d_poses(self):
        ms = [Minutia2D(1.0, 0.0, 0.0), Minutia2D(3.0, -2.0, 1.0)]
        same = g3.apply_pose_2d(ms, 0.0, (0, 0))
        assert [(m.x, m.y) for m in same] == [(m.x, m.y) for m in ms]
        flipped = g3.apply_pose_2d(ms, 0.0, (0, 0), "as-printed")
        assert [(m.x, m.y) for m in flipped] == [(-1.0, 0.0), (-3.0, -2.0)]
        turned = g3.apply_pose_2d(ms[:1], math.pi / 2, (5, 5))[0]
        assert (turned.x, turned.y) == pytest.approx((5.0, 6.0))
        assert turned.theta == pytest.approx(math.pi / 2)


def test_wrap_angle():
    assert g3.wrap_angle(-1e-18) == 0.0
    assert g3.wrap_angle(2 * math.pi) == 0.0
    assert Minutia2D(0, 0, -math.pi / 2).theta == pytest.approx(1.5 * math.pi)
