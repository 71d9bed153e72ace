import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from consensus_nerf.field import EncodingConfig, make_arch
from consensus_nerf.netcore import ContractError, param_count
from consensus_nerf.render import (
    CameraModel, Composite, RenderSettings, generate_ray, image_loss_and_grad, look_at, pixel_rays,
    pixel_rng, read_ppm, render_image, render_loss_and_grad, render_ray, stratified_samples, stratified_t,
    write_ppm, Ray,
)
from oracles import central_difference, he_weights, relative_errors


def test_principal_ray():
    cam = CameraModel(4, 4, 10.0, 10.0, 2.5, 2.5, np.eye(4))
    ray = generate_ray(cam, 2, 2, 1.0, 5.0)
    assert np.allclose(ray.dir, [0, 0, 1], atol=0)


def test_hand_evaluated_direction():
    cam = CameraModel(4, 4, 1.0, 1.0, 0.0, 0.0, np.eye(4))
    # pixel (0.5, -0.5) pre-normalisation would be (1, 0, 1); use u=0.5 -> (u+0.5-cx)/fx = 1
    _, d = pixel_rays(CameraModel(4, 4, 1.0, 1.0, -0.5, 0.5, np.eye(4)), np.array([0]))
    assert np.allclose(d[0], [1 / np.sqrt(2), 0, 1 / np.sqrt(2)], atol=1e-15)
    assert abs(np.linalg.norm(generate_ray(cam, 3, 1, 0, 1).dir) - 1) < 1e-12


def test_origin_is_pose_translation():
    pose = np.eye(4)
    pose[:3, 3] = [1, 2, 3]
    cam = CameraModel(8, 6, 5.0, 5.0, 4.0, 3.0, pose)
    for u, v in [(0, 0), (7, 5), (3, 2)]:
        assert np.array_equal(generate_ray(cam, u, v, 0, 1).origin, [1, 2, 3])


def test_rotated_pose_looks_at_target():
    pose = look_at([3.0, 0.0, 1.0])
    cam = CameraModel(2, 2, 1.0, 1.0, 1.0, 1.0, pose)
    _, d = pixel_rays(cam, np.array([3]))  # pixel (1, 1) center is (1.5, 1.5) -> off-axis
    o, _ = pixel_rays(cam, np.array([0]))
    assert np.allclose(o[0], [3, 0, 1])
    centre = pose[:3, :3] @ np.array([0, 0, 1.0])
    assert np.allclose(centre, -np.array([3, 0, 1]) / np.linalg.norm([3, 0, 1]))


def test_camera_validation():
    with pytest.raises(ContractError):
        CameraModel(4, 4, 0.0, 1.0, 2, 2, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = -1  # reflection
    with pytest.raises(ContractError):
        CameraModel(4, 4, 1.0, 1.0, 2, 2, bad)
    cam = CameraModel(4, 4, 1.0, 1.0, 2, 2, np.eye(4))
    with pytest.raises(ContractError):
        generate_ray(cam, 4, 0)


def test_ray_invariants():
    with pytest.raises(ContractError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]), 0, 1)
    with pytest.raises(ContractError):
        Ray(np.zeros(3), np.array([0, 0, 1.0]), 2, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(0, 5), st.floats(0.1, 5), st.integers(0, 10**6))
def test_stratified_bins(n, near, span, seed):
    ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), near, near + span)
    t = stratified_samples(ray, n, np.random.default_rng(seed))
    lo = near + span * np.arange(n) / n
    hi = near + span * (np.arange(n) + 1) / n
    assert t.shape == (n,)
    assert np.all(t >= lo) and np.all(t <= hi)
    assert np.all(np.diff(t) >= 0)


def test_stratified_seeding():
    ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), 1, 2)
    a = stratified_samples(ray, 16, np.random.default_rng(3))
    b = stratified_samples(ray, 16, np.random.default_rng(3))
    c = stratified_samples(ray, 16, np.random.default_rng(4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_empty_space_renders_background():
    t = np.linspace(1, 2, 8)
    rgb, w, T = render_ray(np.zeros(8), np.full((8, 3), 0.7), t, 2.5)
    assert np.all(rgb == 0) and np.all(w == 0) and np.all(T == 1)
    rgb, _, _ = render_ray(np.zeros(8), np.full((8, 3), 0.7), t, 2.5, background=(1, 1, 1))
    assert np.all(rgb == 1)


def _homogeneous_error(n, n_rays=256, seed=0):
    # constant sigma on [1, 3] with total optical depth ln 2
    sigma = np.log(2) / 2
    c = np.array([0.2, 0.6, 1.0])
    t = stratified_t(n_rays, n, 1.0, 3.0, np.random.default_rng(seed))
    comp = Composite(np.full(t.shape, sigma), np.broadcast_to(c, t.shape + (3,)), t, 3.0)
    return np.abs(comp.color - 0.5 * c).max(axis=1).mean()


def test_homogeneous_medium_closed_form():
    assert _homogeneous_error(4096) < 1e-4
    errs = [_homogeneous_error(n) for n in (8, 16, 32, 64, 128)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_full_occlusion():
    t = np.array([1.0, 2.0, 3.0])
    sigma = np.array([50.0, 1.0, 1.0])
    colors = np.array([[0.1, 0.2, 0.3], [1, 1, 1], [1, 1, 1]])
    rgb, w, T = render_ray(sigma, colors, t, 4.0)
    assert w[0] >= 1 - 1e-20
    assert T[1] < 1e-20
    assert np.allclose(rgb, colors[0], atol=1e-20)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6))
def test_transmittance_and_weight_invariants(n, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 4, n))
    sigma = rng.exponential(2.0, n) * (rng.random(n) < 0.7)
    rgb = rng.random((n, 3))
    col, w, T = render_ray(sigma, rgb, t, 4.5, background=rng.random(3))
    assert T[0] == 1
    assert np.all(np.diff(T) <= 0) and np.all(T > 0) and np.all(T <= 1)
    assert np.all(w >= 0) and np.all(w <= 1) and w.sum() <= 1 + 1e-12
    assert np.all(col >= 0) and np.all(col <= 1 + 1e-12)


def test_unsorted_t_rejected():
    with pytest.raises(ContractError):
        render_ray(np.ones(3), np.ones((3, 3)), np.array([1.0, 3.0, 2.0]), 4.0)


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    R, S = 3, 7
    t = np.sort(rng.uniform(1, 3, (R, S)), axis=1)
    sigma = rng.exponential(1.0, (R, S))
    rgb = rng.random((R, S, 3))
    bg = rng.random(3)
    up = rng.normal(size=(R, 3))
    ds, drgb = Composite(sigma, rgb, t, 3.5, bg).backward(up)
    f_s = lambda s: float(np.sum(Composite(s.reshape(R, S), rgb, t, 3.5, bg).color * up))
    f_c = lambda c: float(np.sum(Composite(sigma, c.reshape(R, S, 3), t, 3.5, bg).color * up))
    idx = np.arange(R * S)
    assert relative_errors(ds.ravel(), central_difference(f_s, sigma.ravel(), idx)).max() < 1e-7
    idx = np.arange(R * S * 3)
    assert relative_errors(drgb.ravel(), central_difference(f_c, rgb.ravel(), idx)).max() < 1e-7


def test_image_loss():
    gt = np.random.default_rng(0).random((5, 3))
    assert image_loss_and_grad(gt, gt)[0] == 0
    pred = np.zeros((2, 3))
    target = pred.copy()
    target[:, 0] = 0.1
    loss, grad = image_loss_and_grad(pred, target)
    assert loss == pytest.approx(0.02, abs=1e-15)
    assert np.allclose(grad[:, 0], -0.2)


def test_image_loss_gradient_fd():
    rng = np.random.default_rng(1)
    pred, gt = rng.random((4, 3)), rng.random((4, 3))
    _, grad = image_loss_and_grad(pred, gt)
    f = lambda p: image_loss_and_grad(p.reshape(4, 3), gt)[0]
    fd = central_difference(f, pred.ravel(), np.arange(12), h=1e-6)
    assert np.abs(fd - grad.ravel()).max() < 1e-8


ENC = EncodingConfig(E_pos=4, E_dir=2)
SETTINGS = RenderSettings(1.0, 4.0, (0.0, 0.0, 0.0), ((-1, -1, -1), (1, 1, 1)))


def _cam(size=16):
    return CameraModel.from_fov(size, size, 45.0, look_at([2.5, 0.0, 0.5]))


def test_zero_density_image_is_background():
    arch = make_arch(ENC, 16)
    w = np.zeros(param_count(arch))
    s = RenderSettings(1.0, 4.0, (0.2, 0.4, 0.6))
    img = render_image(w, arch, ENC, _cam(8), 8, 0, s)
    assert np.allclose(img, [0.2, 0.4, 0.6], atol=1e-15)


def test_pixel_equals_standalone_ray():
    arch = make_arch(ENC, 16)
    w = he_weights(arch, np.random.default_rng(0))
    cam = _cam(16)
    img = render_image(w, arch, ENC, cam, 12, 9, SETTINGS, chunk=37)
    from consensus_nerf.field import field_query
    for u, v in [(0, 0), (5, 11), (15, 15)]:
        ray = generate_ray(cam, u, v, SETTINGS.t_near, SETTINGS.t_far)
        t = stratified_samples(ray, 12, pixel_rng(9, v * cam.width + u))
        pts = ray.origin + t[:, None] * ray.dir
        fp = field_query(w, arch, ENC, pts, np.repeat(ray.dir[None], 12, 0), SETTINGS.bounds)
        rgb, _, _ = render_ray(fp.sigma, fp.color, t, SETTINGS.t_far, SETTINGS.background)
        assert np.array_equal(img[v, u], rgb)


def test_render_chunking_is_bit_exact():
    arch = make_arch(ENC, 32)
    w = he_weights(arch, np.random.default_rng(2)).astype(np.float32)
    a = render_image(w, arch, ENC, _cam(16), 8, 1, SETTINGS, chunk=256)
    b = render_image(w, arch, ENC, _cam(16), 8, 1, SETTINGS, chunk=7)
    assert np.array_equal(a, b)


def test_render_range_64():
    arch = make_arch(EncodingConfig(), 64)
    w = he_weights(arch, np.random.default_rng(3)).astype(np.float32)
    img = render_image(w, arch, EncodingConfig(), _cam(64), 16, 0, SETTINGS)
    assert img.shape == (64, 64, 3)
    assert np.all((img >= 0) & (img <= 1))


def test_end_to_end_gradient():
    arch = make_arch(EncodingConfig(), 32)
    rng = np.random.default_rng(3)
    w = he_weights(arch, rng)
    o, d = pixel_rays(_cam(16), rng.integers(0, 256, 4))
    t = stratified_t(4, 8, 1.0, 4.0, rng)
    gt = rng.random((4, 3))
    loss, grad, _ = render_loss_and_grad(w, arch, EncodingConfig(), o, d, t, gt, SETTINGS)
    f = lambda v: render_loss_and_grad(v, arch, EncodingConfig(), o, d, t, gt, SETTINGS)[0]
    idx = rng.choice(w.size, 200, replace=False)
    assert np.count_nonzero(grad[idx]) > 100
    assert relative_errors(grad[idx], central_difference(f, w, idx)).max() < 1e-5


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == 11 + 105
    back = read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(np.round(back * 255).astype(np.uint8), img)


def test_ppm_header_with_comment(tmp_path):
    (tmp_path / "b.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
    img = read_ppm(tmp_path / "b.ppm")
    assert np.array_equal(img, [[[1, 0, 0], [0, 1, 0]]])
    (tmp_path / "c.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "c.ppm")
