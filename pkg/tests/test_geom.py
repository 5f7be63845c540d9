import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from pano4d.geom import (
    Camera,
    angle_between,
    camera_fan,
    camera_ray,
    dir_to_equirect,
    dir_to_pixel,
    equirect_to_dir,
    face_centroids,
    icosahedron,
    icosphere_samples,
    normalize,
    plane_size_for_fov,
    rotation_about,
)


def random_dirs(n, seed=0, max_abs_z=1.0):
    rng = np.random.default_rng(seed)
    d = normalize(rng.normal(size=(n, 3)))
    return d[np.abs(d[:, 2]) < max_abs_z]


class TestEquirect:
    def test_forward_axis(self):
        u, v = dir_to_equirect(np.array([0.0, 1.0, 0.0]))
        assert (u, v) == (0.0, 0.0)

    def test_back_axis_picks_plus_one(self):
        for x in (0.0, -0.0):
            u, v = dir_to_equirect(np.array([x, -1.0, 0.0]))
            assert u == 1.0 and v == 0.0

    def test_pole(self):
        u, v = dir_to_equirect(np.array([0.0, 0.0, 1.0]))
        assert u == 0.0 and v == pytest.approx(1.0)
        np.testing.assert_allclose(equirect_to_dir(0.0, 1.0), [0, 0, 1], atol=1e-15)

    def test_inverse_examples(self):
        np.testing.assert_allclose(equirect_to_dir(0.0, 0.0), [0, 1, 0], atol=1e-15)

    def test_matches_arccos_form_on_positive_x(self):
        d = random_dirs(5000, seed=1)
        d = d[d[:, 0] >= 0]
        u, _ = dir_to_equirect(d)
        ref = np.arccos(np.clip(d[:, 1] / np.sqrt(1 - d[:, 2] ** 2), -1, 1)) / np.pi
        np.testing.assert_allclose(u, ref, atol=1e-12)

    def test_round_trip_sweep(self):
        rng = np.random.default_rng(2)
        u = rng.uniform(-1, 1, 100_000)
        v = rng.uniform(-0.999, 0.999, 100_000)
        u2, v2 = dir_to_equirect(equirect_to_dir(u, v))
        assert np.max(np.abs(u2 - u)) < 1e-6
        assert np.max(np.abs(v2 - v)) < 1e-6

    def test_seam_sign_convention(self):
        u, _ = dir_to_equirect(np.array([[1e-9, -1.0, 0.0], [-1e-9, -1.0, 0.0]]))
        assert u[0] == pytest.approx(1.0) and u[1] == pytest.approx(-1.0)


class TestCamera:
    def test_center_ray_is_axis(self):
        cam = Camera(np.array([0.3, 0.8, 0.2]))
        np.testing.assert_allclose(camera_ray(cam, 0.0, 0.0), cam.axis, atol=1e-15)

    def test_corner_angle(self):
        cam = Camera(np.array([0.0, 1.0, 0.0]), focal=0.6, plane_size=(0.6, 0.6))
        ray = camera_ray(cam, 1.0, 1.0)
        expected = math.atan(math.sqrt(0.3 ** 2 + 0.3 ** 2) / 0.6)
        assert abs(angle_between(ray, cam.axis) - expected) < 1e-9

    def test_fov(self):
        cam = Camera(np.array([1.0, 0.0, 0.0]), focal=0.6, plane_size=(0.6, 0.6))
        assert abs(cam.fov_deg[0] - math.degrees(2 * math.atan(0.5))) < 1e-9
        assert abs(cam.fov_deg[0] - 53.130) < 1e-3

    def test_up_in_axis_z_plane(self):
        cam = Camera(np.array([0.4, 0.5, 0.3]))
        assert abs(np.dot(np.cross(cam.axis, [0, 0, 1]), cam.up)) < 1e-12
        assert cam.up[2] > 0
        # image +x points right when looking along +y with z up
        assert Camera(np.array([0.0, 1.0, 0.0])).right @ [1, 0, 0] == pytest.approx(1.0)

    def test_pole_axis_rejected_without_override(self):
        with pytest.raises(ValueError):
            Camera(np.array([0.0, 0.0, 1.0]))
        cam = Camera(np.array([0.0, 0.0, 1.0]), up_hint=np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(cam.up, [0, 1, 0], atol=1e-12)

    def test_behind_camera_is_empty(self):
        cam = Camera(np.array([0.2, 0.9, -0.1]))
        x, y, inside = dir_to_pixel(cam, cam.axis)
        assert inside and abs(x) < 1e-12 and abs(y) < 1e-12
        _, _, inside = dir_to_pixel(cam, -cam.axis)
        assert not inside

    def test_ray_pixel_round_trip(self):
        rng = np.random.default_rng(3)
        cam = Camera(np.array([0.5, -0.3, 0.4]), plane_size=(1.0, 0.8))
        x = rng.uniform(-1, 1, 10_000)
        y = rng.uniform(-1, 1, 10_000)
        x2, y2, inside = dir_to_pixel(cam, camera_ray(cam, x, y))
        assert inside.all()
        assert max(np.abs(x2 - x).max(), np.abs(y2 - y).max()) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 3.0))
    def test_ray_is_unit(self, x, y, focal):
        cam = Camera(np.array([1.0, 2.0, 0.5]), focal=focal)
        assert abs(np.linalg.norm(camera_ray(cam, x, y)) - 1.0) < 1e-12


class TestIcosphere:
    def test_face_centroids_well_separated(self):
        s = icosphere_samples(1)
        assert len(s) == 20
        ang = angle_between(s.points[:, None], s.points[None])
        ang[np.diag_indices(20)] = np.inf
        # adjacent face centroids of an icosahedron are ~41.8 degrees apart
        assert np.degrees(ang.min()) > 30.0
        np.testing.assert_allclose(s.points, face_centroids(), atol=1e-12)

    @pytest.mark.parametrize("per_face", [1, 7, 100, 200])
    def test_counts_and_norms(self, per_face):
        s = icosphere_samples(per_face)
        assert len(s) == 20 * per_face
        assert np.bincount(s.face_id).tolist() == [per_face] * 20
        assert np.max(np.abs(np.linalg.norm(s.points, axis=1) - 1)) < 1e-9

    def test_nearest_neighbour_uniformity(self):
        s = icosphere_samples(100)
        d, _ = cKDTree(s.points).query(s.points, k=2)
        nn = d[:, 1]
        assert nn.std() / nn.mean() < 0.35

    def test_no_duplicate_points(self):
        s = icosphere_samples(200)
        d, _ = cKDTree(s.points).query(s.points, k=2)
        assert d[:, 1].min() > 1e-4

    def test_rotation_covariance(self):
        R = rotation_about(np.array([0.3, -0.2, 0.9]), 0.7)
        base = icosphere_samples(50).points
        np.testing.assert_allclose(icosphere_samples(50, rotation=R).points, base @ R.T, atol=1e-14)

    def test_icosahedral_symmetry_maps_set_to_itself(self):
        # 72 degree turn about a vertex is a symmetry of the icosahedron
        verts, _ = icosahedron()
        R = rotation_about(verts[0], 2 * np.pi / 5)
        pts = icosphere_samples(36).points
        d, _ = cKDTree(pts).query(pts @ R.T)
        assert d.max() < 1e-9


class TestFan:
    def test_fov_construction(self):
        for cam in camera_fan(80.0, 16):
            assert abs(2 * math.degrees(math.atan(cam.plane_size[0] / 2 / cam.focal)) - 80.0) < 1e-9
            assert cam.roll == 0.0

    def test_axes_are_face_centroids(self):
        axes = np.array([c.axis for c in camera_fan()])
        np.testing.assert_allclose(axes, face_centroids(), atol=1e-12)

    def test_plane_size_at_default_focal(self):
        assert abs(plane_size_for_fov(53.13010235415598, 0.6) - 0.6) < 1e-6

    def test_fan_covers_sphere(self):
        pts = icosphere_samples(200).points
        covered = np.zeros(len(pts), bool)
        for cam in camera_fan(80.0, 8):
            covered |= dir_to_pixel(cam, pts)[2]
        assert covered.all()

    def test_narrow_fan_leaves_gaps(self):
        pts = icosphere_samples(50).points
        covered = np.zeros(len(pts), bool)
        for cam in camera_fan(40.0, 8):
            covered |= dir_to_pixel(cam, pts)[2]
        assert not covered.all()

    def test_fan_pairs_overlap(self):
        cams = camera_fan(80.0, 8)
        pts = icosphere_samples(30).points
        inside = np.array([dir_to_pixel(c, pts)[2] for c in cams])
        overlaps = sum((inside[a] & inside[b]).any() for a, b in itertools.combinations(range(20), 2))
        assert overlaps >= 30
