"""Synthetic scene generation: exact GT, photoconsistency, determinism."""

import numpy as np
import pytest

from litemvs.config import FusionConfig
from litemvs.fusion import consistency_check
from litemvs.geometry import back_project, project
from litemvs.scenes import (
    SceneSpec,
    _SpherePart,
    default_specs,
    load_scene,
    render,
    write_scene,
)


class TestGroundTruth:
    def test_fronto_plane_constant_depth_in_central_view(self):
        scene = render(SceneSpec(seed=30, kind="plane", image_size=(64, 64)))
        centre = len(scene.views) // 2
        gt = scene.gt_depth[centre]
        assert np.all(gt > 0)
        np.testing.assert_allclose(gt, gt[0, 0], rtol=1e-12)

    def test_sphere_depth_matches_analytic_intersection(self):
        """Renderer depth vs an independently coded quadratic-formula oracle."""
        from litemvs.scenes import _build_surface, _make_texture, _raycast

        spec = SceneSpec(seed=31, kind="sphere", image_size=(64, 64))
        rng = np.random.default_rng(31)
        surface, anchor = _build_surface(spec, rng)
        tex = _make_texture(rng)
        sphere = next(p for p in surface.parts if isinstance(p, _SpherePart))
        backdrop = next(p for p in surface.parts if not isinstance(p, _SpherePart))
        rng2 = np.random.default_rng(spec.seed)  # reproduce the camera draw
        from litemvs.scenes import _arc_cameras

        _build_surface(spec, rng2), _make_texture(rng2)
        view = _arc_cameras(spec, rng2, anchor)[1]
        _, depth = _raycast(view, surface, tex, (64, 64), want_image=False)

        inv_k = np.linalg.inv(view.K)
        c = view.center
        hit_sphere = 0
        for y in range(0, 64, 3):
            for x in range(0, 64, 3):
                d = view.R.T @ (inv_k @ np.array([x, y, 1.0]))
                # closed-form ray-sphere intersection
                oc = c - sphere.center
                a = d @ d
                b = 2 * d @ oc
                cc = oc @ oc - sphere.radius ** 2
                disc = b * b - 4 * a * cc
                candidates = []
                if disc >= 0:
                    s = (-b - np.sqrt(disc)) / (2 * a)
                    if s > 0:
                        candidates.append(s)
                s_plane = (backdrop.offset - backdrop.n @ c) / (backdrop.n @ d)
                if s_plane > 0:
                    candidates.append(s_plane)
                expected = min(candidates)
                assert abs(depth[y, x] - expected) < 1e-9
                if disc >= 0 and expected != s_plane:
                    hit_sphere += 1
        assert hit_sphere > 10  # the sphere fills part of the frame

    def test_every_visible_point_within_depth_range(self):
        for spec in default_specs(5, 8):
            scene = render(spec)
            for view, gt in zip(scene.views, scene.gt_depth):
                hit = gt > 0
                assert gt[hit].min() >= view.d_min
                assert gt[hit].max() <= view.d_max


class TestPhotoconsistency:
    def test_cross_view_warp_residual_under_two_percent(self):
        scene = render(SceneSpec(seed=32, kind="plane", image_size=(64, 64)))
        ref, src = scene.views[0], scene.views[1]
        gt = scene.gt_depth[0]
        h, w = gt.shape
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pix = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(float)
        uv, z = project(pix, gt.ravel().astype(float), ref, src)
        u, v = uv[:, 0], uv[:, 1]
        valid = (z > 0) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        x0 = np.clip(np.floor(u).astype(int), 0, w - 2)
        y0 = np.clip(np.floor(v).astype(int), 0, h - 2)
        fx = (u - x0)[:, None]
        fy = (v - y0)[:, None]
        img = src.image.astype(np.float64)
        warped = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x0 + 1] * (1 - fy) * fx
                  + img[y0 + 1, x0] * fy * (1 - fx) + img[y0 + 1, x0 + 1] * fy * fx)
        residual = warped[valid] - ref.image.reshape(-1, 3)[valid]
        rms = float(np.sqrt(np.mean(residual ** 2)))
        assert rms < 0.02, rms

    def test_gt_passes_fusion_consistency_at_paper_thresholds(self):
        # 48x48 maps: nearest-pixel quantization stays well under the 1% tolerance
        scene = render(SceneSpec(seed=33, kind="tilted", image_size=(192, 192), arc_scale=0.5))
        views = [v.scaled(0.25) for v in scene.views]
        depths = scene.gt_depth_quarter
        cfg = FusionConfig()
        h, w = depths[0].shape
        counts = consistency_check(views[0], depths[0], list(zip(views[1:], depths[1:])), cfg)
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pix = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(float)
        covisible = np.zeros(h * w, dtype=int)
        for view in views[1:]:
            uv, z = project(pix, depths[0].ravel().astype(float), views[0], view)
            ui, vi = np.rint(uv[:, 0]), np.rint(uv[:, 1])
            covisible += (z > 0) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        np.testing.assert_array_equal(counts.ravel(), covisible)


class TestDeterminism:
    def test_same_seed_same_scene(self):
        a = render(SceneSpec(seed=34, kind="step", image_size=(64, 64)))
        b = render(SceneSpec(seed=34, kind="step", image_size=(64, 64)))
        for va, vb in zip(a.views, b.views):
            assert va.image.tobytes() == vb.image.tobytes()
            np.testing.assert_array_equal(va.R, vb.R)
        for da, db in zip(a.gt_depth, b.gt_depth):
            assert da.tobytes() == db.tobytes()


class TestSceneIO:
    def test_write_and_load_round_trip(self, tmp_path):
        scene = render(SceneSpec(seed=35, kind="step", image_size=(64, 64)))
        write_scene(tmp_path / "scene_0000", scene)
        loaded = load_scene(tmp_path / "scene_0000")
        assert len(loaded.views) == len(scene.views)
        np.testing.assert_array_equal(loaded.gt_depth[0], scene.gt_depth[0])
        np.testing.assert_array_equal(loaded.gt_depth_quarter[2], scene.gt_depth_quarter[2])
        np.testing.assert_allclose(loaded.views[1].K, scene.views[1].K)
        np.testing.assert_allclose(loaded.views[1].R, scene.views[1].R)
        # PNG quantizes to 8 bits
        assert np.abs(loaded.views[0].image - scene.views[0].image).max() < 1.0 / 255
        assert loaded.meta["kind"] == "step"

    def test_default_specs_cover_kinds_and_ranges(self):
        specs = default_specs(0, 20)
        assert len(specs) == 20
        kinds = {s.kind for s in specs}
        assert kinds == {"plane", "tilted", "sphere", "step"}
        assert sum(s.wide_range for s in specs) == 10
        # held-out tail is planes/tilted only
        assert all(s.kind in ("plane", "tilted") for s in specs[-4:])
