import numpy as np
import pytest

from pano4d.geom import Camera, camera_fan, equirect_directions, equirect_pixel_uv, normalize
from pano4d.image import (
    EquirectImage,
    PanoVideo,
    PerspectiveImage,
    project_perspective,
    read_png,
    read_png16,
    sample_equirect,
    sample_equirect_nearest,
    splat_back,
    write_png,
    write_png16,
)


def smooth_pano(h, w, channels=3):
    d = equirect_directions(h, w)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    base = 0.5 + 0.15 * x * y + 0.2 * np.sin(2 * z) + 0.1 * x
    return np.stack([base + 0.03 * k * y for k in range(channels)], axis=-1)


def test_containers_validate():
    with pytest.raises(ValueError):
        EquirectImage(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        EquirectImage(np.full((2, 4, 1), np.nan))
    with pytest.raises(ValueError):
        PanoVideo([])
    with pytest.raises(ValueError):
        PanoVideo([EquirectImage(np.zeros((2, 4, 1))), EquirectImage(np.zeros((4, 8, 1)))])
    assert EquirectImage(np.zeros((2, 4))).channels == 1


def test_constant_image_samples_constant():
    img = EquirectImage(np.full((8, 16, 2), 0.25))
    d = normalize(np.random.default_rng(0).normal(size=(100, 3)))
    np.testing.assert_allclose(sample_equirect(img, d), 0.25, atol=1e-15)


def test_seam_reads_average_of_adjacent_texels():
    img = EquirectImage(np.array([[[0.0], [1.0]]]))  # 2x1 checkerboard
    out = sample_equirect(img, np.array([0.0, -1.0, 0.0]))
    assert out[0] == pytest.approx(0.5)


def test_bilinear_close_to_nearest_on_gradient():
    h, w = 256, 512
    u, v = equirect_pixel_uv(h, w)
    data = (0.5 + 0.4 * np.sin(np.pi * u) * np.cos(np.pi * v / 2))[..., None]
    d = normalize(np.random.default_rng(1).normal(size=(10_000, 3)))
    diff = np.abs(sample_equirect(data, d) - sample_equirect_nearest(data, d))
    assert diff.max() < 1.0 / 255


def test_seam_continuity():
    h, w = 64, 128
    data = smooth_pano(h, w, 1)
    eps = 1e-4
    a = sample_equirect(data, np.array([np.sin(np.pi * (1 - eps)), np.cos(np.pi * (1 - eps)), 0.0]))
    b = sample_equirect(data, np.array([np.sin(-np.pi * (1 - eps)), np.cos(-np.pi * (1 - eps)), 0.0]))
    lipschitz = 1.0
    assert abs(a - b)[0] < 2 * eps * w * lipschitz


def test_project_constant():
    img = EquirectImage(np.full((16, 32, 3), 0.7))
    out = project_perspective(img, Camera(np.array([0.3, 0.4, 0.1]), res_w=9, res_h=7))
    assert out.data.shape == (7, 9, 3)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


def test_vertical_gradient_symmetric_about_midline():
    h, w = 256, 512
    _, v = equirect_pixel_uv(h, w)
    img = EquirectImage(np.abs(v)[..., None])
    cam = Camera(np.array([0.6, 0.8, 0.0]), res_w=32, res_h=32)
    out = project_perspective(img, cam).data[..., 0]
    np.testing.assert_allclose(out, out[::-1], atol=1e-6)
    img2 = EquirectImage(v[..., None])
    out2 = project_perspective(img2, cam).data[..., 0]
    np.testing.assert_allclose(out2, -out2[::-1], atol=1e-6)


def test_projection_records_camera():
    cam = Camera(np.array([1.0, 0.0, 0.0]), res_w=4, res_h=4)
    p = project_perspective(np.zeros((4, 8, 1)), cam, frame=3)
    assert p.camera is cam and p.frame == 3


def test_splat_single_view_value():
    cam = Camera(np.array([0.0, 1.0, 0.0]), focal=0.6, plane_size=(1.0, 1.0), res_w=16, res_h=16)
    view = PerspectiveImage(np.full((16, 16, 1), 0.3))
    out, wt = splat_back([(view, cam)], (16, 32))
    covered = wt > 0
    assert covered.any() and not covered.all()
    np.testing.assert_allclose(out.data[covered], 0.3, atol=1e-15)
    assert np.all(out.data[~covered] == 0)


def test_splat_duplicate_views_weight_two():
    cam = Camera(np.array([0.0, 1.0, 0.0]), res_w=16, res_h=16)
    rng = np.random.default_rng(0)
    view = PerspectiveImage(rng.uniform(size=(16, 16, 2)))
    one, w1 = splat_back([(view, cam)], (16, 32))
    two, w2 = splat_back([(view, cam), (view, cam)], (16, 32))
    assert w2.max() == 2
    np.testing.assert_array_equal(w2, 2 * w1)
    np.testing.assert_allclose(two.data, one.data, atol=1e-15)


def test_splat_order_invariant():
    cams = camera_fan(80.0, 24)
    pano = smooth_pano(32, 64)
    views = [(project_perspective(pano, c), c) for c in cams]
    a, _ = splat_back(views, (32, 64))
    b, _ = splat_back(views[::-1], (32, 64))
    np.testing.assert_array_equal(a.data, b.data)


def test_fan_round_trip_and_coverage():
    h, w = 512, 1024
    pano = smooth_pano(h, w)
    cams = camera_fan(80.0, 256)
    views = [(project_perspective(pano, c), c) for c in cams]
    out, weight = splat_back(views, (h, w))
    assert (weight > 0).all()
    _, v = equirect_pixel_uv(h, w)
    mid = np.abs(v) <= 0.95
    assert np.abs(out.data - pano)[mid].mean() < 2.0 / 255


def test_png_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(4, 8, 3)) / 255.0
    write_png(tmp_path / "a.png", rgb)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), rgb, atol=1e-12)
    gray = rng.integers(0, 65536, size=(4, 8)) / 65535.0
    write_png16(tmp_path / "m.png", gray)
    np.testing.assert_allclose(read_png16(tmp_path / "m.png"), gray, atol=1e-12)
