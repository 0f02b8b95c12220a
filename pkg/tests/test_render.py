import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_scene
from geosplat360.camera import EquirectCamera, Ray, look_at_rotation, unproject
from geosplat360.gaussians import (
    GaussianPrimitive,
    GaussianScene,
    axis_angle_quat,
    normalize_quat,
    quat_multiply,
    quat_to_rotmat,
    rotmat_to_quat,
)
from geosplat360.losses import LossWeights, evaluate
from geosplat360.panorama import PanoramaBuffer
from geosplat360.render import (
    ALPHA_MIN,
    RenderOptions,
    composite_depth,
    composite_rgb,
    depth_to_normal,
    depth_to_normal_backward,
    falloff_opacity,
    intersection_depth,
    make_fragments,
    render,
    render_backward,
)
from geosplat360.synth import render_gt, roomA

IDENTITY = np.array([1.0, 0, 0, 0])


def plane_hit(n, p, d):
    """Independent oracle: solve o + t d on the plane by a 2x2 least squares on the plane basis."""
    n = np.asarray(n) / np.linalg.norm(n)
    # write the hit as p + a u + b v and solve [d, -u, -v] [t, a, b]^T = p
    u = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    t, _, _ = np.linalg.solve(np.column_stack([d, -u, -v]), p)
    return t


# --- fragment primitives ------------------------------------------------

def test_intersection_depth_examples():
    assert intersection_depth([0, 0, 1], [0, 0, 5], [0, 0, 1]) == 5.0
    r = [0, np.sin(np.pi / 6), np.cos(np.pi / 6)]
    # the z-coordinate of the hit is 5; the Euclidean hit distance is longer
    assert intersection_depth([0, 0, 1], [0, 0, 5], r, literal=True) == pytest.approx(5.0, rel=1e-12)
    assert intersection_depth([0, 0, 1], [0, 0, 5], r) == pytest.approx(5.0 / np.cos(np.pi / 6), rel=1e-12)


def test_grazing_ray_is_rejected():
    assert intersection_depth([0, 0, 1], [0, 0, 5], [1.0, 0, 0]) is None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_intersection_matches_plane_solver(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    if abs(n @ d) < 1e-2:
        return
    p = rng.normal(size=3) * 3
    t = intersection_depth(n, p, Ray(np.zeros(3), d))
    assert t == pytest.approx(plane_hit(n, p, d), rel=1e-9, abs=1e-12)
    assert intersection_depth(n, p, d, literal=True) == pytest.approx(d[2] * t, rel=1e-12, abs=1e-15)


def flat(alpha=0.7, center=(0, 0, 3), scales=(0.5, 0.5, 0.01), q=IDENTITY):
    return GaussianPrimitive(np.array(center, float), np.array(scales, float), np.asarray(q, float), alpha,
                             np.full(3, 0.5))


def test_falloff_examples():
    g = flat()
    assert falloff_opacity(g, [0, 0, 1]) == pytest.approx(0.7, abs=1e-15)
    assert falloff_opacity(flat(alpha=0.0), [0, 0, 1]) == 0.0
    # hit point 0.5 m along x on the plane z=3: Mahalanobis distance 1
    d = np.array([0.5, 0, 3.0]) / np.linalg.norm([0.5, 0, 3.0])
    assert falloff_opacity(g, d) == pytest.approx(0.7 * np.exp(-0.5), rel=1e-9)


def test_falloff_matches_quadratic_form(rng):
    for _ in range(50):
        q = normalize_quat(rng.normal(size=4))
        g = flat(0.9, rng.normal(size=3) * 0.2 + [0, 0, 3], rng.uniform(0.2, 1, 3), q)
        d = rng.normal(size=3) * 0.1 + [0, 0, 1]
        d /= np.linalg.norm(d)
        # smallest-variance eigenvector of the covariance is the disc normal
        n = np.linalg.eigh(g.covariance)[1][:, 0]
        t = (n @ g.center) / (n @ d)
        delta = t * d - g.center
        m = delta @ np.linalg.inv(g.covariance) @ delta
        expected = 0.9 * np.exp(-0.5 * m)
        got = falloff_opacity(g, d)
        if expected < ALPHA_MIN:
            assert got == 0.0
        else:
            assert got == pytest.approx(expected, rel=1e-8)


def test_falloff_culls_faint_and_singular():
    g = flat(alpha=0.7)
    far = np.array([3.0, 0, 3.0]) / np.linalg.norm([3.0, 0, 3.0])
    assert falloff_opacity(g, far) == 0.0
    assert falloff_opacity(g, [0, 0, 1], cov=np.zeros((3, 3))) == 0.0


def test_composite_depth_examples():
    assert composite_depth(make_fragments([4.0], [1.0])) == 4.0
    two = make_fragments([4.0, 2.0], [0.5, 0.5])
    assert [f.depth for f in two] == [2.0, 4.0]
    assert composite_depth(two) == pytest.approx(2.0 / 0.75, rel=1e-15)
    assert composite_depth(make_fragments([1.0, 2.0], [0.0, 0.0])) == -1.0
    assert composite_depth([]) == -1.0


def test_composite_rgb_examples():
    bg = (0.2, 0.3, 0.4)
    np.testing.assert_array_equal(composite_rgb([], [], bg), bg)
    one = make_fragments([3.0], [1.0])
    np.testing.assert_array_equal(composite_rgb(one, [[0.9, 0.1, 0.5]], bg), [0.9, 0.1, 0.5])


def test_fragment_sort_is_stable_on_ties():
    frags = make_fragments([2.0, 1.0, 2.0, 2.0], [0.1, 0.2, 0.3, 0.4], indices=[7, 3, 1, 5])
    assert [f.index for f in frags] == [3, 1, 5, 7]


def over_operator(depths, alphas, colors, bg):
    """Sequential back-to-front over-compositing of depth-sorted fragments."""
    order = np.argsort(depths, kind="stable")
    out = np.asarray(bg, float)
    for i in order[::-1]:
        out = alphas[i] * colors[i] + (1 - alphas[i]) * out
    return out


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composite_properties(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 12))
    depths = rng.uniform(0.5, 10, m)
    alphas = rng.uniform(0, 1, m)
    colors = rng.uniform(0, 1, (m, 3))
    frags = make_fragments(depths, alphas)
    sorted_colors = colors[[f.index for f in frags]]
    rgb = composite_rgb(frags, sorted_colors, (0.1, 0.2, 0.3))
    np.testing.assert_allclose(rgb, over_operator(depths, alphas, colors, (0.1, 0.2, 0.3)), atol=1e-12)
    w = np.array([f.alpha * f.transmittance for f in frags])
    t_end = np.prod(1 - alphas)
    assert abs(w.sum() + t_end - 1.0) < 1e-9
    d = composite_depth(frags)
    if d > 0:
        assert depths.min() <= d <= depths.max()


def test_fragment_opacity_outside_unit_interval_rejected():
    with pytest.raises(Exception):
        make_fragments([1.0], [1.5])


# --- full-panorama renders ----------------------------------------------

def brute_force_pixel(cam, scene, u, v):
    """Render one pixel with the scalar fragment functions (camera at the origin)."""
    d = cam.ray_directions()[v, u]
    depths, alphas, idx = [], [], []
    for i, g in enumerate(scene.to_primitives()):
        n = quat_to_rotmat(g.rotation)[:, int(np.argmin(g.scales))]
        t = intersection_depth(n, g.center, d)
        if t is None or t <= 1e-3:
            continue
        a = falloff_opacity(g, d)
        if a > 0:
            depths.append(t)
            alphas.append(a)
            idx.append(i)
    frags = make_fragments(depths, alphas, idx)
    rgb = composite_rgb(frags, scene.colors[[f.index for f in frags]]) if frags else np.zeros(3)
    return rgb, composite_depth(frags)


@pytest.mark.parametrize("mode", ["reference", "tiled"])
def test_render_matches_brute_force_pixels(rng, mode):
    cam = EquirectCamera(48, 24)
    scene = random_scene(rng, 25, opacity=(0.1, 0.5))
    out = render(cam, scene, mode=mode)
    for _ in range(40):
        u, v = int(rng.integers(0, 48)), int(rng.integers(0, 24))
        rgb, depth = brute_force_pixel(cam, scene, u, v)
        np.testing.assert_allclose(out.rgb[v, u], rgb, atol=1e-9)
        assert out.depth[v, u] == pytest.approx(depth, abs=1e-9)


def test_fronto_parallel_disc_depth():
    cam = EquirectCamera(64, 32)
    out = render(cam, GaussianScene.from_primitives([flat(1.0, (0, 0, 2.5), (0.4, 0.4, 0.005))]))
    assert out.depth[15, 31] == pytest.approx(2.5 / cam.ray_directions()[15, 31, 2], rel=1e-12)
    assert out.depth[0, 0] == -1.0


def test_empty_scene_gives_background():
    cam = EquirectCamera(16, 8)
    empty = GaussianScene(np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))
    out = render(cam, empty, background=(0.1, 0.2, 0.3))
    np.testing.assert_allclose(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], (8, 16, 3)))
    assert np.all(out.depth == -1.0)
    assert np.all(out.alpha == 0.0)


def test_pose_moves_with_scene(rng):
    scene = random_scene(rng, 30)
    R = look_at_rotation([0.3, 0.2, 1.0])
    t = np.array([0.5, -0.2, 0.1])
    moved = scene.copy()
    moved.means = scene.means @ R.T + t
    moved.quats = quat_multiply(rotmat_to_quat(R), scene.quats)
    a = render(EquirectCamera(64, 32), scene, normals=False)
    b = render(EquirectCamera(64, 32, R, t), moved, normals=False)
    np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-9)
    np.testing.assert_allclose(a.depth, b.depth, atol=1e-9)


def test_tiled_matches_reference(rng):
    cam = EquirectCamera(128, 64)
    for _ in range(3):
        scene = random_scene(rng, 200)
        a = render(cam, scene, mode="reference", normals=False)
        b = render(cam, scene, mode="tiled", normals=False)
        assert np.abs(a.rgb - b.rgb).max() < 1e-5
        assert np.abs(a.depth - b.depth).max() < 1e-5


def test_render_is_deterministic_and_order_independent(rng):
    cam = EquirectCamera(64, 32)
    scene = random_scene(rng, 60)
    a = render(cam, scene)
    b = render(cam, scene)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    perm = rng.permutation(len(scene))
    c = render(cam, scene.subset(perm))
    np.testing.assert_allclose(a.rgb, c.rgb, atol=1e-12)
    np.testing.assert_allclose(a.depth, c.depth, atol=1e-12)


def test_literal_depth_option():
    cam = EquirectCamera(64, 32)
    scene = GaussianScene.from_primitives([flat(1.0, (0, 0, 2.0), (3.0, 3.0, 0.01))])
    euclid = render(cam, scene).depth
    literal = render(cam, scene, literal_depth=True).depth
    hit = euclid > 0
    np.testing.assert_allclose(literal[hit], euclid[hit] * cam.ray_directions()[..., 2][hit], rtol=1e-12)


def test_room_fitted_with_texel_splats_has_right_depth():
    room = roomA(128, 64)
    cam = room.cameras[0]
    gt = render_gt(room, cam)
    vv, uu = np.mgrid[0:64, 0:128]
    means = unproject(cam, uu.ravel(), vv.ravel(), gt.depth.ravel())
    normals = gt.normal.reshape(-1, 3) @ cam.rotation.T
    quats = []
    for n in normals:
        a = np.cross(n, [0, 1.0, 0] if abs(n[1]) < 0.9 else [1.0, 0, 0])
        a /= np.linalg.norm(a)
        quats.append(rotmat_to_quat(np.column_stack([a, np.cross(n, a), n])))
    size = 1.5 * gt.depth.ravel() * np.pi / 64
    scales = np.stack([size, size, 0.01 * size], axis=1)
    scene = GaussianScene(means, scales, np.array(quats), np.full(len(means), 0.99), np.full((len(means), 3), 0.5))
    depth = render(cam, scene, normals=False).depth
    rel = np.abs(depth - gt.depth) / gt.depth
    assert np.median(rel) < 0.01


# --- normals from depth --------------------------------------------------

def angles_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1)))


def lat_band(cam, deg=60.0, edge=2):
    lat = np.degrees(cam.latitudes())[:, None] * np.ones((1, cam.width))
    band = np.abs(lat) <= deg
    band[:edge] = band[-edge:] = False
    return band


def wall_junctions(normal, width):
    from scipy.ndimage import binary_dilation

    edge = np.zeros(normal.shape[:2], bool)
    for axis in (0, 1):
        for shift in (1, -1):
            edge |= np.abs(np.roll(normal, shift, axis=axis) - normal).sum(-1) > 1e-6
    return binary_dilation(edge, iterations=width)


def test_sphere_depth_gives_radial_normals():
    cam = EquirectCamera(256, 128)
    n = depth_to_normal(cam, np.full((128, 256), 3.0))
    band = lat_band(cam, 60, 1)
    assert angles_deg(n, -cam.ray_directions())[band].max() < 0.5


def test_plane_depth_gives_facing_normal():
    cam = EquirectCamera(256, 128)
    dirs = cam.ray_directions()
    with np.errstate(divide="ignore"):
        depth = np.where(dirs[..., 2] > 0.2, 2.0 / dirs[..., 2], -1.0)
    n, valid = depth_to_normal(cam, depth, return_mask=True)
    band = lat_band(cam, 60) & valid & (dirs[..., 2] > 0.3)
    assert band.sum() > 1000
    assert angles_deg(n, np.array([0, 0, -1.0]))[band].max() < 0.5


def test_invalid_neighbours_give_zero_normal():
    cam = EquirectCamera(32, 16)
    depth = np.full((16, 32), 2.0)
    depth[8, 10] = -1
    n, valid = depth_to_normal(cam, depth, return_mask=True)
    for v, u in [(8, 10), (8, 9), (8, 11), (7, 10), (9, 10)]:
        assert not valid[v, u]
        np.testing.assert_array_equal(n[v, u], 0)
    assert not valid[0].any() and not valid[-1].any()
    norms = np.linalg.norm(n[valid], axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_depth_to_normal_backward_matches_fd(rng):
    cam = EquirectCamera(16, 8)
    depth = 2 + rng.uniform(-0.3, 0.3, (8, 16))
    g = rng.normal(size=(8, 16, 3))
    grad = depth_to_normal_backward(cam, depth, g)
    f = lambda d: float(np.sum(depth_to_normal(cam, d) * g))
    for v, u in [(3, 0), (4, 7), (1, 15), (6, 3)]:
        e = np.zeros_like(depth)
        e[v, u] = 1e-6
        fd = (f(depth + e) - f(depth - e)) / 2e-6
        assert grad[v, u] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_room_normals_match_walls():
    room = roomA(256, 128)
    cam = room.cameras[0]
    gt = render_gt(room, cam)
    n = depth_to_normal(cam, gt.depth)
    band = lat_band(cam) & ~wall_junctions(gt.normal, 2)
    ok = angles_deg(n, gt.normal)[band] < 1.0
    assert ok.mean() > 0.98


# --- gradients -----------------------------------------------------------

def single_pixel_case(rng):
    cam = EquirectCamera(64, 32)
    mu = np.array([rng.normal(0, 0.05), rng.normal(0, 0.05), rng.uniform(2, 3)])
    q = axis_angle_quat(rng.normal(size=3), rng.uniform(0, 0.6))
    s = [rng.uniform(0.2, 0.35), rng.uniform(0.2, 0.35), rng.uniform(0.01, 0.05)]
    scene = GaussianScene([mu], [s], [q], [rng.uniform(0.3, 0.9)], [rng.uniform(0, 1, 3)])
    mask = np.zeros((32, 64), bool)
    mask[15, 31] = True
    nt = rng.normal(size=(32, 64, 3))
    tgt = PanoramaBuffer(rgb=rng.uniform(0, 1, (32, 64, 3)), depth=rng.uniform(1, 4, (32, 64)),
                         normal=nt / np.linalg.norm(nt, axis=-1, keepdims=True), mask=mask)
    return cam, scene, tgt


@pytest.mark.parametrize("mode", ["reference", "tiled"])
def test_loss_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(7)
    opts = RenderOptions(mode=mode)
    w = LossWeights()
    for _ in range(3):
        cam, scene, tgt = single_pixel_case(rng)
        g = evaluate(scene, cam, tgt, w, opts, want_grad=True).gradient
        analytic = g.pack()[0]
        x0 = scene.pack()[0]
        for i in range(14):
            h = 1e-4 * max(abs(x0[i]), 1.0)
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd = (evaluate(GaussianScene.unpack(xp), cam, tgt, w, opts).total
                  - evaluate(GaussianScene.unpack(xm), cam, tgt, w, opts).total) / (2 * h)
            assert abs(analytic[i] - fd) <= max(1e-3 * max(abs(fd), abs(analytic[i])), 1e-6)


def test_transparent_gaussian_has_no_gradient(rng):
    cam = EquirectCamera(32, 16)
    scene = GaussianScene.from_primitives([flat(0.0, (0, 0, 2.0), (0.5, 0.5, 0.01))])
    g = render_backward(cam, scene, g_rgb=rng.normal(size=(16, 32, 3)), g_depth=rng.normal(size=(16, 32)))
    for arr in (g.means, g.scales, g.quats, g.colors):
        np.testing.assert_array_equal(arr, 0.0)


def test_tiled_speedup_on_dense_scene(rng):
    cam = EquirectCamera(256, 128)
    scene = random_scene(rng, 2000, scale=(0.02, 0.08))
    for mode in ("reference", "tiled"):
        render(cam, scene, mode=mode, normals=False)  # compile
    t0 = time.perf_counter()
    render(cam, scene, mode="reference", normals=False)
    t1 = time.perf_counter()
    render(cam, scene, mode="tiled", normals=False)
    t2 = time.perf_counter()
    assert (t1 - t0) > 2 * (t2 - t1)
