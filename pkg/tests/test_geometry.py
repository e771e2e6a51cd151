import numpy as np
import pytest

from scenewalk import geometry as ge
from scenewalk.errors import EmptyScene, NonPositiveDepth, ShapeMismatch

from conftest import checker_image


def random_camera(rng, size=(16, 16)):
    h, w = size
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return ge.Camera(
        fx=float(rng.uniform(20, 40)),
        fy=float(rng.uniform(20, 40)),
        cx=(w - 1) / 2 + float(rng.uniform(-1, 1)),
        cy=(h - 1) / 2 + float(rng.uniform(-1, 1)),
        rotation=q,
        translation=rng.uniform(-0.1, 0.1, size=3),
        size=size,
    )


def brute_force_render(scene, camera, z_near=ge.Z_NEAR):
    """Per-point loop oracle for the z-buffer."""
    h, w = camera.size
    best = {}
    for i in range(len(scene)):
        p = camera.rotation @ scene.positions[i] + camera.translation
        if p[2] <= z_near:
            continue
        u = int(np.rint(camera.fx * p[0] / p[2] + camera.cx))
        v = int(np.rint(camera.fy * p[1] / p[2] + camera.cy))
        if not (0 <= u < w and 0 <= v < h):
            continue
        if (v, u) not in best or p[2] < best[(v, u)][0]:
            best[(v, u)] = (p[2], i)
    mask = np.ones((h, w), dtype=np.uint8)
    image = np.zeros((h, w, 3))
    for (v, u), (z, i) in best.items():
        mask[v, u] = 0
        image[v, u] = scene.colors[i]
    return image, mask


class TestCamera:
    def test_default_geometry(self):
        cam = ge.Camera.default((16, 16))
        assert np.allclose(cam.center, 0)
        assert np.allclose(cam.view_dir, [0, 0, 1])

    def test_rejects_non_orthonormal(self):
        bad = np.eye(3)
        bad[0, 1] = 1e-3
        with pytest.raises(ShapeMismatch):
            ge.Camera(10, 10, 8, 8, bad, np.zeros(3), (16, 16))

    def test_document_round_trip(self, rng):
        cam = random_camera(rng)
        cam2 = ge.Camera.from_document(cam.to_document())
        assert np.array_equal(cam.rotation, cam2.rotation)
        assert np.array_equal(cam.translation, cam2.translation)


class TestUnproject:
    def test_principal_pixel_on_axis(self):
        cam = ge.Camera(fx=4, fy=4, cx=8, cy=8, rotation=np.eye(3), translation=np.zeros(3), size=(16, 16))
        depth = np.full((16, 16), 1.5)
        pts = ge.unproject(checker_image(16, 16), depth, cam)
        i = 8 * 16 + 8  # row-major index of pixel (8, 8)
        assert np.allclose(pts.positions[i], [0, 0, 1.5])

    def test_constant_depth_plane(self, rng):
        cam = ge.Camera.default((8, 8))
        pts = ge.unproject(checker_image(8, 8), np.ones((8, 8)), cam)
        assert np.allclose(pts.positions[:, 2], 1.0)

    def test_pinhole_forced_point(self):
        cam = ge.Camera(fx=4, fy=4, cx=8, cy=8, rotation=np.eye(3), translation=np.zeros(3), size=(16, 16))
        depth = np.full((16, 16), 2.0)
        pts = ge.unproject(checker_image(16, 16), depth, cam)
        i = 8 * 16 + 12  # pixel (row cy=8, col cx+fx=12)
        assert np.allclose(pts.positions[i], [2, 0, 2])

    def test_rejects_bad_depth(self):
        cam = ge.Camera.default((8, 8))
        with pytest.raises(NonPositiveDepth):
            ge.unproject(checker_image(8, 8), np.zeros((8, 8)), cam)

    def test_select_subset(self):
        cam = ge.Camera.default((8, 8))
        pick = np.zeros((8, 8), dtype=np.uint8)
        pick[2:4, 2:4] = 1
        pts = ge.unproject(checker_image(8, 8), np.ones((8, 8)), cam, select=pick)
        assert len(pts) == 4


class TestMerge:
    def test_merge_with_empty(self):
        cam = ge.Camera.default((8, 8))
        p = ge.unproject(checker_image(8, 8), np.ones((8, 8)), cam)
        merged = ge.merge(ge.PointCloudScene.empty(), p)
        assert np.array_equal(merged.positions, p.positions)

    def test_sizes_add(self):
        cam = ge.Camera.default((8, 8))
        p = ge.unproject(checker_image(8, 8), np.ones((8, 8)), cam)
        assert len(ge.merge(p, p)) == 2 * len(p)

    def test_associative(self):
        cam = ge.Camera.default((4, 4))
        p = ge.unproject(checker_image(4, 4), np.ones((4, 4)), cam)
        a = ge.merge(ge.merge(p, p), p)
        b = ge.merge(p, ge.merge(p, p))
        assert np.array_equal(a.positions, b.positions)


class TestRender:
    def test_round_trip_exact(self, rng):
        for _ in range(50):
            cam = random_camera(rng)
            image = rng.random((16, 16, 3))
            depth = rng.uniform(0.5, 5.0, size=(16, 16))
            pts = ge.unproject(image, depth, cam)
            out = ge.render(pts, cam)
            assert out.fill_mask.sum() == 0
            assert np.array_equal(out.partial_image, image)

    def test_mask_matches_brute_force(self, rng):
        for _ in range(20):
            cam = random_camera(rng)
            image = rng.random((16, 16, 3))
            depth = rng.uniform(0.5, 5.0, size=(16, 16))
            pts = ge.unproject(image, depth, cam)
            cam2 = random_camera(rng)
            out = ge.render(pts, cam2)
            ref_img, ref_mask = brute_force_render(pts, cam2)
            assert np.array_equal(out.fill_mask, ref_mask)
            assert np.array_equal(out.partial_image, ref_img)

    def test_z_test_keeps_nearest(self):
        cam = ge.Camera.default((4, 4))
        positions = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        scene = ge.PointCloudScene(positions, colors, np.array([0, 1]))
        out = ge.render(scene, cam)
        v, u = int(np.rint(cam.cy)), int(np.rint(cam.cx))
        assert np.array_equal(out.partial_image[v, u], [0, 1, 0])
        assert out.rendered_depth[v, u] == 1.0

    def test_depth_tie_prefers_earlier_point(self):
        cam = ge.Camera.default((4, 4))
        positions = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        scene = ge.PointCloudScene(positions, colors, np.array([0, 1]))
        out = ge.render(scene, cam)
        v, u = int(np.rint(cam.cy)), int(np.rint(cam.cx))
        assert np.array_equal(out.partial_image[v, u], [1, 0, 0])

    def test_empty_scene(self):
        with pytest.raises(EmptyScene):
            ge.render(ge.PointCloudScene.empty(), ge.Camera.default((4, 4)))

    def test_wider_splat_fills_more(self):
        cam = ge.Camera.default((16, 16))
        pts = ge.unproject(checker_image(16, 16), np.full((16, 16), 2.0), cam)
        back = ge.make_trajectory("recede", 1, 0.5, cam)[1]
        narrow = ge.render(pts, back, splat_radius=1)
        wide = ge.render(pts, back, splat_radius=2)
        assert wide.fill_mask.sum() < narrow.fill_mask.sum()
        # wider splats never uncover a pixel the narrow splat covered
        assert not ((wide.fill_mask == 1) & (narrow.fill_mask == 0)).any()

    def test_receding_camera_border_mask(self):
        cam = ge.Camera.default((16, 16))
        image = checker_image(16, 16)
        pts = ge.unproject(image, np.full((16, 16), 2.0), cam)
        back = ge.make_trajectory("recede", 1, 0.5, cam)[1]
        out = ge.render(pts, back)
        assert out.fill_mask.sum() > 0
        assert out.fill_mask[3:13, 3:13].sum() == 0  # interior stays covered
        covered = np.argwhere(out.fill_mask == 0)
        holes = np.argwhere(out.fill_mask == 1)
        # holes only on the border ring
        assert (np.minimum(holes, 15 - holes).min(axis=1) < 3).all()


class TestAlignDepth:
    def render_for(self, depth):
        cam = ge.Camera.default((8, 8))
        pts = ge.unproject(checker_image(8, 8), depth, cam)
        return ge.render(pts, cam)

    def test_identity_fit(self, rng):
        depth = rng.uniform(1, 3, size=(8, 8))
        out = self.render_for(depth)
        aligned = ge.align_depth(depth, out)
        assert np.allclose(aligned, depth)

    def test_double_scale(self, rng):
        rendered = rng.uniform(1, 3, size=(8, 8))
        out = self.render_for(rendered)
        aligned = ge.align_depth(2.0 * rendered, out)
        assert np.allclose(aligned, rendered)

    def test_affine_recovery_matches_normal_equations(self, rng):
        d_est = rng.uniform(1, 4, size=(8, 8))
        s_true, b_true = 0.7, 0.4
        out = self.render_for(s_true * d_est + b_true)
        aligned = ge.align_depth(d_est, out)
        assert np.abs(aligned - (s_true * d_est + b_true)).max() < 1e-6
        # closed-form normal equations oracle
        x, y = d_est.ravel(), (s_true * d_est + b_true).ravel()
        n = x.size
        A = np.array([[np.sum(x * x), np.sum(x)], [np.sum(x), n]])
        s, b = np.linalg.solve(A, [np.sum(x * y), np.sum(y)])
        assert np.allclose([s, b], [s_true, b_true], atol=1e-9)

    def test_degenerate_falls_back_to_identity(self, rng):
        depth = rng.uniform(1, 3, size=(8, 8))
        empty = ge.RenderResult(
            partial_image=np.zeros((8, 8, 3)),
            fill_mask=np.ones((8, 8), dtype=np.uint8),
            rendered_depth=np.zeros((8, 8)),
        )
        aligned = ge.align_depth(depth, empty)
        assert np.allclose(aligned, depth)


class TestTrajectory:
    def test_zero_steps(self):
        cam = ge.Camera.default((8, 8))
        assert ge.make_trajectory("recede", 0, 0.1, cam) == [cam]

    def test_recede_distances(self):
        cam = ge.Camera.default((8, 8))
        traj = ge.make_trajectory("recede", 3, 0.1, cam)
        for k, c in enumerate(traj):
            behind = (cam.center - c.center) @ cam.view_dir
            assert behind == pytest.approx(0.1 * k, abs=1e-12)

    def test_translate_distances(self):
        cam = ge.Camera.default((8, 8))
        traj = ge.make_trajectory("translate", 2, 0.25, cam)
        assert np.allclose(traj[2].center, cam.center + 0.5 * cam.right_dir)

    def test_orbit_full_revolution(self):
        cam = ge.Camera.default((8, 8))
        n = 8
        traj = ge.make_trajectory("orbit", n, 2 * np.pi / n, cam)
        assert np.abs(traj[-1].rotation - cam.rotation).max() < 1e-9
        assert np.abs(traj[-1].translation - cam.translation).max() < 1e-9

    def test_all_rotations_orthonormal(self, rng):
        cam = random_camera(rng)
        for kind in ("recede", "translate", "orbit"):
            for c in ge.make_trajectory(kind, 5, 0.3, cam):
                assert np.abs(c.rotation.T @ c.rotation - np.eye(3)).max() < 1e-9


def test_xyzrgb_round_trip(rng):
    cam = ge.Camera.default((8, 8))
    pts = ge.unproject(rng.random((8, 8, 3)), rng.uniform(0.5, 2, (8, 8)), cam)
    back = ge.import_xyzrgb(ge.export_xyzrgb(pts))
    assert np.array_equal(back.positions, pts.positions)
    assert np.array_equal(back.colors, pts.colors)
