import math

import numpy as np
import pytest

from depthbev.depth import GridSpec
from depthbev.errors import ConfigError, DimensionError, ValidationError
from depthbev.geometry import (BevFeatureMap, Box3D, CameraModel, PointCloud, Rect, VoxelGrid,
                               VoxelGridConfig, box_bev_rect, box_corners_3d, crop_bev_box,
                               depth_bin_centers, height_compress, lift_splat, load_boxes,
                               load_cameras, project_box_to_image, roi_align, save_boxes,
                               save_cameras, voxel_config_for_grid, voxel_pool_box, voxelize,
                               voxels_in_box)
from depthbev.scenes import default_camera_rig
from depthbev.stubs import Dense, RoiStub, VoxelPoolStub
from depthbev.tensor import Tensor


def identity_stub(dim, rng=None):
    stub = Dense(dim, dim, np.random.default_rng(0))
    stub.weight.data[...] = np.eye(dim)
    stub.bias.data[...] = 0.0
    return stub


def bilinear_ref(feat, y, x):
    """Independent bilinear sampler: values at pixel centers, border clamp."""
    rows, cols, _ = feat.shape
    fy = min(max(y - 0.5, 0.0), rows - 1.0)
    fx = min(max(x - 0.5, 0.0), cols - 1.0)
    y0, x0 = int(math.floor(fy)), int(math.floor(fx))
    y1, x1 = min(y0 + 1, rows - 1), min(x0 + 1, cols - 1)
    wy, wx = fy - y0, fx - x0
    return ((1 - wy) * (1 - wx) * feat[y0, x0] + (1 - wy) * wx * feat[y0, x1]
            + wy * (1 - wx) * feat[y1, x0] + wy * wx * feat[y1, x1])


def roi_align_dense_oracle(feat, rect, bins, s=64):
    br, bc = bins
    bh = (rect.r1 - rect.r0) / br
    bw = (rect.c1 - rect.c0) / bc
    off = (np.arange(s) + 0.5) / s
    out = np.zeros((br, bc, feat.shape[2]))
    for i in range(br):
        for j in range(bc):
            acc = np.zeros(feat.shape[2])
            for a in off:
                for b in off:
                    acc += bilinear_ref(feat, rect.r0 + (i + a) * bh, rect.c0 + (j + b) * bw)
            out[i, j] = acc / (s * s)
    return out


class TestBox3D:
    def test_yaw_normalized(self):
        b = Box3D(center=(0, 0, 0), size=(1, 1, 1), yaw=3 * math.pi)
        assert -math.pi < b.yaw <= math.pi
        assert b.yaw == pytest.approx(math.pi)

    def test_bad_size(self):
        with pytest.raises(ValidationError):
            Box3D(center=(0, 0, 0), size=(0.0, 1, 1), yaw=0)

    def test_bad_score(self):
        with pytest.raises(ValidationError):
            Box3D(center=(0, 0, 0), size=(1, 1, 1), yaw=0, score=1.5)

    def test_corners(self):
        b = Box3D(center=(1, 2, 3), size=(2, 4, 6), yaw=0.0)
        corners = box_corners_3d(b)
        assert corners.shape == (8, 3)
        np.testing.assert_allclose(corners[:, 0].min(), 0.0)
        np.testing.assert_allclose(corners[:, 1].max(), 4.0)
        np.testing.assert_allclose(corners[:, 2].max(), 6.0)

    def test_json_round_trip(self, tmp_path):
        boxes = [Box3D(center=(1, 2, 0.5), size=(4, 2, 1.5), yaw=0.3, score=0.9, class_id=2)]
        save_boxes(tmp_path / "b.json", boxes)
        assert load_boxes(tmp_path / "b.json") == boxes


class TestCameraModel:
    def test_rig_is_rigid(self):
        for cam in default_camera_rig(4, (32, 64)):
            r = cam.extrinsics[:3, :3]
            assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-12
            assert abs(np.linalg.det(r) - 1.0) < 1e-12

    def test_rejects_non_orthonormal(self):
        t = np.eye(4)
        t[0, 0] = 2.0
        with pytest.raises(ValidationError):
            CameraModel(intrinsics=np.eye(3), extrinsics=t, image_size=(4, 4))

    def test_round_trip_transform(self):
        cam = default_camera_rig(3, (8, 8))[1]
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(cam.camera_to_ego(cam.ego_to_camera(pts)), pts, atol=1e-12)

    def test_json_round_trip(self, tmp_path):
        cams = default_camera_rig(2, (16, 24))
        save_cameras(tmp_path / "c.json", cams)
        loaded = load_cameras(tmp_path / "c.json")
        for a, b in zip(cams, loaded):
            np.testing.assert_allclose(a.intrinsics, b.intrinsics)
            np.testing.assert_allclose(a.extrinsics, b.extrinsics)
            assert a.image_size == b.image_size


class TestPointCloud:
    def test_intensity_range(self):
        with pytest.raises(ValidationError):
            PointCloud([[0, 0, 0, 1.5]])

    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.normal(size=(20, 3)), rng.uniform(size=20)])
        pc = PointCloud(pts)
        pc.save(tmp_path / "p.bin")
        loaded = PointCloud.load(tmp_path / "p.bin")
        np.testing.assert_allclose(loaded.points, pts, atol=1e-6)  # f32 on disk


class TestVoxelize:
    def config(self):
        return VoxelGridConfig(voxel_size=(0.5, 0.5, 0.5), x_range=(-2, 2), y_range=(-2, 2),
                               z_range=(-1, 1))

    def test_single_point_at_voxel_center(self):
        cfg = self.config()
        # voxel (4, 4, 2) center is (0.25, 0.25, 0.25)
        pc = PointCloud([[0.25, 0.25, 0.25, 0.8]])
        vox = voxelize(pc, cfg, identity_stub(5))
        assert vox.n_occupied == 1 and vox.dropped_points == 0
        np.testing.assert_array_equal(vox.indices[0], [4, 4, 2])
        np.testing.assert_allclose(vox.features.data[0],
                                   [0.0, 0.0, 0.0, 0.8, math.log(2.0)], atol=1e-12)

    def test_two_identical_points(self):
        cfg = self.config()
        pc = PointCloud([[0.3, 0.3, 0.3, 0.5], [0.3, 0.3, 0.3, 0.5]])
        vox = voxelize(pc, cfg, identity_stub(5))
        assert vox.n_occupied == 1
        np.testing.assert_allclose(vox.features.data[0, :3], [0.05, 0.05, 0.05], atol=1e-12)
        assert vox.features.data[0, 4] == pytest.approx(math.log(3.0))

    def test_against_binning_oracle(self):
        cfg = self.config()
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(-3, 3, size=(200, 3)), rng.uniform(size=200)])
        vox = voxelize(PointCloud(pts), cfg, identity_stub(5))

        expected = set()
        dropped = 0
        for x, y, z, _ in pts:
            i = math.floor((x + 2) / 0.5)
            j = math.floor((y + 2) / 0.5)
            k = math.floor((z + 1) / 0.5)
            if 0 <= i < 8 and 0 <= j < 8 and 0 <= k < 4:
                expected.add((i, j, k))
            else:
                dropped += 1
        assert {tuple(ijk) for ijk in vox.indices.tolist()} == expected
        assert vox.dropped_points == dropped

    def test_occupancy_map(self):
        vox = voxelize(PointCloud([[0.25, 0.25, 0.25, 0.5]]), self.config(), identity_stub(5))
        assert vox.occupancy_map() == {(4, 4, 2): 0}


class TestHeightCompress:
    def grid(self):
        return GridSpec(width=4, height=4, cell_size=1.0)

    def test_empty_grid_all_zero(self):
        grid = self.grid()
        cfg = voxel_config_for_grid(grid, 0.5, 0.5, (-1, 1))
        vox = voxelize(PointCloud(np.zeros((0, 4))), cfg, identity_stub(5))
        stub = Dense(5, 3, np.random.default_rng(0), bias=False)
        bev = height_compress(vox, grid, stub)
        np.testing.assert_array_equal(bev.features.data, np.zeros((4, 4, 3)))

    def test_single_voxel_single_cell(self):
        grid = self.grid()
        cfg = voxel_config_for_grid(grid, 0.5, 0.5, (-1, 1))
        vox = voxelize(PointCloud([[0.3, 0.3, 0.3, 0.5]]), cfg, identity_stub(5))
        stub = Dense(5, 5, np.random.default_rng(0), bias=False)
        bev = height_compress(vox, grid, stub)
        nz = np.nonzero(np.abs(bev.features.data).sum(axis=2))
        assert list(zip(*nz)) == [(2, 2)]

    def test_against_column_loop_oracle(self):
        grid = self.grid()
        cfg = voxel_config_for_grid(grid, 0.5, 0.5, (-1, 1))
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(-2, 2, size=(150, 3)) * [1, 1, 0.5],
                               rng.uniform(size=150)])
        vox = voxelize(PointCloud(pts), cfg, identity_stub(5))
        stub = identity_stub(5)
        stub.bias = None
        bev = height_compress(vox, grid, stub)

        expect = np.zeros((4, 4, 5))
        for row, ijk in enumerate(vox.indices):
            center = vox.config.voxel_center(ijk[None, :])[0]
            cx = math.floor(center[0] / 1.0) + 2
            cy = math.floor(center[1] / 1.0) + 2
            expect[cx, cy] += vox.features.data[row]
        assert np.max(np.abs(bev.features.data - expect)) < 1e-12

    def test_uneven_voxels_rejected(self):
        grid = self.grid()
        cfg = VoxelGridConfig(voxel_size=(0.3, 0.3, 0.5), x_range=(-2, 2), y_range=(-2, 2),
                              z_range=(-1, 1))
        vox = VoxelGrid(cfg, np.zeros((0, 3)), Tensor(np.zeros((0, 5))))
        with pytest.raises(ConfigError):
            height_compress(vox, grid, Dense(5, 3, np.random.default_rng(0), bias=False))


class TestLiftSplat:
    def test_one_pixel_one_hot_bin(self):
        grid = GridSpec(width=10, height=10, cell_size=1.0)
        cam = default_camera_rig(1, (1, 1), fov_deg=90.0, height=1.5)[0]
        centers = depth_bin_centers(4, 1.0, 9.0)
        feat = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        dist = np.zeros((1, 1, 4))
        dist[0, 0, 1] = 1.0  # bin center = 4 m straight ahead
        bev = lift_splat([feat], [dist], [cam], grid, centers)
        depth = centers[1]
        cell = (5 + math.floor(depth / 1.0), 5)
        np.testing.assert_allclose(bev.features.data[cell], [1.0, 2.0, 3.0], atol=1e-12)
        assert np.abs(bev.features.data).sum() == pytest.approx(6.0)

    def test_conservation_identity(self):
        rng = np.random.default_rng(4)
        grid = GridSpec(width=12, height=12, cell_size=2.0)
        cams = default_camera_rig(2, (5, 7), fov_deg=80.0)
        centers = depth_bin_centers(6, 1.0, 20.0)
        for _ in range(20):
            feats = [Tensor(rng.normal(size=(5, 7, 3))) for _ in cams]
            dists = []
            for _ in cams:
                d = rng.uniform(0.05, 1.0, size=(5, 7, 6))
                dists.append(d / d.sum(axis=-1, keepdims=True))
            bev = lift_splat(feats, dists, cams, grid, centers)

            expected = np.zeros(3)
            for cam, f, d in zip(cams, feats, dists):
                kinv = np.linalg.inv(cam.intrinsics)
                for r in range(5):
                    for c in range(7):
                        ray = kinv @ np.array([c + 0.5, r + 0.5, 1.0])
                        for b, depth in enumerate(centers):
                            p = cam.camera_to_ego((ray * depth)[None, :])[0]
                            ix = math.floor(p[0] / 2.0) + 6
                            iy = math.floor(p[1] / 2.0) + 6
                            if 0 <= ix < 12 and 0 <= iy < 12:
                                expected += d[r, c, b] * f.data[r, c]
            got = bev.features.data.sum(axis=(0, 1))
            assert np.max(np.abs(got - expected)) < 1e-9

    def test_two_pixel_two_bin_hand_case(self):
        grid = GridSpec(width=8, height=8, cell_size=1.0)
        cam = default_camera_rig(1, (1, 2), fov_deg=90.0, height=1.0)[0]
        centers = np.array([2.0, 3.5])
        feat = Tensor(np.array([[[1.0], [10.0]]]))
        dist = np.array([[[0.25, 0.75], [0.6, 0.4]]])
        bev = lift_splat([feat], [dist], [cam], grid, centers)

        expect = np.zeros((8, 8, 1))
        kinv = np.linalg.inv(cam.intrinsics)
        for c in range(2):
            ray = kinv @ np.array([c + 0.5, 0.5, 1.0])
            for b, depth in enumerate(centers):
                p = cam.camera_to_ego((ray * depth)[None, :])[0]
                ix, iy = math.floor(p[0]) + 4, math.floor(p[1]) + 4
                expect[ix, iy, 0] += dist[0, c, b] * feat.data[0, c, 0]
        np.testing.assert_allclose(bev.features.data, expect, atol=1e-12)

    def test_linearity_in_features(self):
        rng = np.random.default_rng(5)
        grid = GridSpec(width=8, height=8, cell_size=2.0)
        cams = default_camera_rig(1, (4, 5), fov_deg=80.0)
        centers = depth_bin_centers(5, 1.0, 14.0)
        a = rng.normal(size=(4, 5, 2))
        b = rng.normal(size=(4, 5, 2))
        d = rng.uniform(0.1, 1.0, size=(4, 5, 5))
        d /= d.sum(axis=-1, keepdims=True)

        def lift(x):
            return lift_splat([Tensor(x)], [d], cams, grid, centers).features.data

        np.testing.assert_allclose(lift(2.0 * a - 3.0 * b), 2.0 * lift(a) - 3.0 * lift(b),
                                   atol=1e-9)

    def test_rejects_unnormalized(self):
        grid = GridSpec(width=4, height=4, cell_size=2.0)
        cams = default_camera_rig(1, (2, 2))
        centers = depth_bin_centers(3, 1.0, 5.0)
        bad = np.full((2, 2, 3), 0.5)
        with pytest.raises(ValidationError):
            lift_splat([Tensor(np.zeros((2, 2, 1)))], [bad], cams, grid, centers)


class TestProjectBox:
    def cam_800(self):
        # focal 500 px on an 800x800 image
        fov = 2.0 * math.degrees(math.atan(400.0 / 500.0))
        return default_camera_rig(1, (800, 800), fov_deg=fov, height=0.0)[0]

    def test_focal_is_500(self):
        assert self.cam_800().intrinsics[0, 0] == pytest.approx(500.0)

    def test_behind_camera(self):
        box = Box3D(center=(-10.0, 0.0, 0.0), size=(1, 1, 1), yaw=0.0)
        assert project_box_to_image(box, self.cam_800()) is None

    def test_pinhole_unit_box(self):
        cam = self.cam_800()
        box = Box3D(center=(10.0, 0.0, 0.0), size=(1, 1, 1), yaw=0.0)
        rect = project_box_to_image(box, cam)
        side_u = rect.c1 - rect.c0
        side_v = rect.r1 - rect.r0
        # thin-lens estimate f*s/z = 50 px; the near face projects slightly larger
        assert side_u == pytest.approx(50.0, rel=0.1)
        assert side_v == pytest.approx(50.0, rel=0.1)
        assert (rect.c0 + rect.c1) / 2 == pytest.approx(400.0, abs=1e-9)

        # corner-projection oracle
        us, vs = [], []
        for corner in box_corners_3d(box):
            p = cam.ego_to_camera(corner[None, :])[0]
            assert p[2] > 0
            us.append(cam.intrinsics[0, 0] * p[0] / p[2] + cam.intrinsics[0, 2])
            vs.append(cam.intrinsics[1, 1] * p[1] / p[2] + cam.intrinsics[1, 2])
        assert rect == pytest.approx(Rect(min(vs), min(us), max(vs), max(us)))

    def test_straddling_edge_clipped(self):
        cam = self.cam_800()
        box = Box3D(center=(5.0, 4.2, 0.0), size=(1, 1, 1), yaw=0.0)
        rect = project_box_to_image(box, cam)
        assert rect is not None and rect.c0 == 0.0

    def test_depth_monotonicity(self):
        cam = self.cam_800()
        areas = []
        for depth in (8.0, 12.0, 20.0, 40.0):
            rect = project_box_to_image(
                Box3D(center=(depth, 0.0, 0.0), size=(1, 1, 1), yaw=0.0), cam)
            areas.append(rect.area)
        assert all(a > b for a, b in zip(areas, areas[1:]))


class TestRoiAlign:
    def test_constant_map(self):
        feat = Tensor(np.full((6, 8, 3), 2.5))
        out = roi_align(feat, Rect(0.7, 1.3, 4.9, 6.1), (3, 3), samples=2)
        np.testing.assert_allclose(out.data, np.full((3, 3, 3), 2.5), atol=1e-12)

    def test_unit_bins_match_pixels(self):
        rng = np.random.default_rng(6)
        feat = rng.normal(size=(7, 7, 2))
        out = roi_align(Tensor(feat), Rect(2.0, 3.0, 5.0, 6.0), (3, 3), samples=1)
        np.testing.assert_allclose(out.data, feat[2:5, 3:6], atol=1e-12)

    def test_two_by_two_blocks_equal_average_pooling(self):
        rng = np.random.default_rng(7)
        feat = rng.normal(size=(8, 8, 2))
        out = roi_align(Tensor(feat), Rect(1.0, 2.0, 5.0, 6.0), (2, 2), samples=2)
        pooled = feat[1:5, 2:6].reshape(2, 2, 2, 2, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out.data, pooled, atol=1e-12)

    def test_against_supersampled_oracle(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(10):
            feat = rng.uniform(-1, 1, size=(10, 12, 2))
            r0, c0 = rng.uniform(0, 5), rng.uniform(0, 7)
            rect = Rect(r0, c0, r0 + rng.uniform(1.5, 4.0), c0 + rng.uniform(1.5, 4.0))
            mine = roi_align(Tensor(feat), rect, (3, 3), samples=32).data
            ref = roi_align_dense_oracle(feat, rect, (3, 3), s=64)
            worst = max(worst, float(np.max(np.abs(mine - ref))))
        assert worst < 1e-3

    def test_translation_consistency(self):
        rng = np.random.default_rng(9)
        base = np.zeros((16, 16, 2))
        base[2:9, 2:9] = rng.normal(size=(7, 7, 2))
        shifted = np.zeros((16, 16, 2))
        shifted[5:12, 4:11] = base[2:9, 2:9]
        rect = Rect(3.0, 3.5, 7.5, 7.0)
        rect2 = Rect(rect.r0 + 3, rect.c0 + 2, rect.r1 + 3, rect.c1 + 2)
        a = roi_align(Tensor(base), rect, (3, 3), samples=2).data
        b = roi_align(Tensor(shifted), rect2, (3, 3), samples=2).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_degenerate_rect(self):
        with pytest.raises(ValidationError):
            roi_align(Tensor(np.zeros((4, 4, 1))), Rect(1.0, 1.0, 1.0, 3.0))


class TestVoxelPoolBox:
    def setup_grid(self):
        cfg = VoxelGridConfig(voxel_size=(0.5, 0.5, 0.5), x_range=(-4, 4), y_range=(-4, 4),
                              z_range=(-1, 1))
        rng = np.random.default_rng(10)
        ext = cfg.extents
        idx = np.unique(np.column_stack([rng.integers(0, e, size=40) for e in ext]), axis=0)
        feats = Tensor(rng.normal(size=(idx.shape[0], 4)))
        return VoxelGrid(cfg, idx, feats)

    def test_single_voxel_pre_stub(self):
        cfg = VoxelGridConfig(voxel_size=(1.0, 1.0, 1.0), x_range=(-2, 2), y_range=(-2, 2),
                              z_range=(-1, 1))
        feats = Tensor(np.array([[1.0, 2.0, 3.0]]))
        vox = VoxelGrid(cfg, np.array([[2, 2, 1]]), feats)  # center (0.5, 0.5, 0.5)
        box = Box3D(center=(0.5, 0.5, 0.5), size=(1.5, 1.5, 1.5), yaw=0.2)
        rows = voxels_in_box(vox, box)
        np.testing.assert_array_equal(rows, [0])
        pooled = vox.features.data[rows].max(axis=0)
        np.testing.assert_array_equal(pooled, [1.0, 2.0, 3.0])

    def test_empty_box_returns_learned_embedding(self):
        vox = self.setup_grid()
        stub = VoxelPoolStub(4, 6, np.random.default_rng(11))
        box = Box3D(center=(100.0, 100.0, 0.0), size=(1, 1, 1), yaw=0.0)
        out = voxel_pool_box(vox, box, stub)
        assert out is stub.empty
        assert np.any(out.data != 0.0)

    def test_rotated_box_matches_loop_oracle(self):
        vox = self.setup_grid()
        box = Box3D(center=(0.4, -0.7, 0.1), size=(3.0, 1.5, 1.2), yaw=0.9)
        got = set(voxels_in_box(vox, box).tolist())

        expect = set()
        for row, ijk in enumerate(vox.indices):
            center = vox.config.voxel_center(ijk[None, :])[0]
            rel = center - np.array(box.center)
            c, s = math.cos(-box.yaw), math.sin(-box.yaw)
            lx = rel[0] * c - rel[1] * s
            ly = rel[0] * s + rel[1] * c
            if (abs(lx) <= 1.5 and abs(ly) <= 0.75 and abs(rel[2]) <= 0.6):
                expect.add(row)
        assert got == expect

    def test_full_path_matches_manual_stub(self):
        vox = self.setup_grid()
        stub = VoxelPoolStub(4, 6, np.random.default_rng(12))
        box = Box3D(center=(0.0, 0.0, 0.0), size=(4.0, 4.0, 2.0), yaw=0.0)
        out = voxel_pool_box(vox, box, stub)
        rows = voxels_in_box(vox, box)
        pooled = vox.features.data[rows].max(axis=0)
        mixed = pooled @ stub.mix_weight.data + stub.mix_bias.data
        expect = mixed @ stub.out_weight.data + stub.out_bias.data
        np.testing.assert_allclose(out.data, expect, atol=1e-12)


class TestCropBevBox:
    def test_constant_map_constant_crop(self):
        grid = GridSpec(width=10, height=10, cell_size=1.0)
        bev = BevFeatureMap(grid=grid, features=Tensor(np.full((10, 10, 2), 3.0)))
        box = Box3D(center=(1.0, -1.0, 0.5), size=(3.0, 2.0, 1.0), yaw=0.5)
        crop = roi_align(bev.features, box_bev_rect(box, grid), (3, 3), samples=2)
        np.testing.assert_allclose(crop.data, np.full((3, 3, 2), 3.0), atol=1e-12)

    def test_one_hot_locality(self):
        grid = GridSpec(width=10, height=10, cell_size=1.0)
        feat = np.zeros((10, 10, 1))
        feat[6, 5] = 1.0  # inside the footprint below
        bev = BevFeatureMap(grid=grid, features=Tensor(feat))
        box = Box3D(center=(1.5, 0.5, 0.5), size=(2.0, 2.0, 1.0), yaw=0.0)
        stub = RoiStub(1, 4, np.random.default_rng(13))
        assert np.any(crop_bev_box(bev, box, stub).data != stub.bias.data)

        far = np.zeros((10, 10, 1))
        far[0, 0] = 1.0
        bev_far = BevFeatureMap(grid=grid, features=Tensor(far))
        out = crop_bev_box(bev_far, box, stub)
        np.testing.assert_allclose(out.data, stub.bias.data, atol=1e-12)

    def test_axis_aligned_box_average_pooling(self):
        grid = GridSpec(width=12, height=12, cell_size=1.0)
        rng = np.random.default_rng(14)
        feat = rng.normal(size=(12, 12, 2))
        bev = BevFeatureMap(grid=grid, features=Tensor(feat))
        # footprint spans cells [3:9] x [2:8]: 6x6 cells, 2x2 cells per bin
        box = Box3D(center=(0.0, -1.0, 0.5), size=(6.0, 6.0, 1.0), yaw=0.0)
        stub = RoiStub(2, 5, np.random.default_rng(15))
        out = crop_bev_box(bev, box, stub)
        pooled = feat[3:9, 2:8].reshape(3, 2, 3, 2, 2).mean(axis=(1, 3))
        expect = pooled.reshape(1, -1) @ stub.weight.data + stub.bias.data
        np.testing.assert_allclose(out.data, expect[0], atol=1e-12)

    def test_fully_outside_raises(self):
        from depthbev.errors import BoundsError
        grid = GridSpec(width=6, height=6, cell_size=1.0)
        bev = BevFeatureMap(grid=grid, features=Tensor(np.zeros((6, 6, 1))))
        box = Box3D(center=(50.0, 50.0, 0.5), size=(2.0, 2.0, 1.0), yaw=0.0)
        with pytest.raises(BoundsError):
            crop_bev_box(bev, box, RoiStub(1, 2, np.random.default_rng(16)))


class TestBevFeatureMap:
    def test_shape_validation(self):
        grid = GridSpec(width=4, height=4, cell_size=1.0)
        with pytest.raises(DimensionError):
            BevFeatureMap(grid=grid, features=Tensor(np.zeros((3, 4, 2))))
