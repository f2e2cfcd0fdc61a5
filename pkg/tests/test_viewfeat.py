"""Unit tests for the viewfeat extraction tool.

Scene/ray-caster oracles are brute-force per-triangle intersection loops
and analytically constructed occluders; projection examples use cameras
with hand-computed projections; PCA checks use exact linear-algebra
identities.  The bank writer is checked byte-for-byte against the format
definition and through the acoustic package's independent loader.
"""

import json
import struct
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import viewfeat as vf
from viewfeat.cli import main as vf_main

# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def quad_scene(z=2.0, half=0.5):
    """Two-triangle square occluder at height z covering |x|,|y| <= half."""
    v = [[-half, -half, z], [half, -half, z], [half, half, z],
         [-half, half, z]]
    return vf.Scene(np.asarray(v, float), np.asarray([[0, 1, 2], [0, 2, 3]]))


def _ray_tri(orig, dest, v0, v1, v2):
    """Reference segment-triangle test (brute-force oracle)."""
    d = np.asarray(dest, float) - np.asarray(orig, float)
    dist = np.linalg.norm(d)
    d = d / dist
    e1, e2 = np.asarray(v1) - v0, np.asarray(v2) - v0
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-12:
        return False
    inv = 1.0 / det
    tv = np.asarray(orig, float) - v0
    u = (tv @ p) * inv
    q = np.cross(tv, e1)
    v = (d @ q) * inv
    t = (e2 @ q) * inv
    return (u >= -1e-9 and v >= -1e-9 and u + v <= 1 + 1e-9
            and 1e-9 < t < dist - 1e-6)


def look_at(center, forward, up=(0.0, 0.0, 1.0)):
    """3x4 world->camera matrix for a camera at `center` facing `forward`."""
    f = np.asarray(forward, float)
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, float))
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    return np.hstack([rot, (-rot @ np.asarray(center, float))[:, None]])


def center_K(w, h, f=50.0):
    return np.array([[f, 0.0, (w - 1) / 2], [0.0, f, (h - 1) / 2],
                     [0.0, 0.0, 1.0]])


def toy_setup(tmp_path, n_views=2, hw=(40, 56), seed=0):
    """Images + cameras JSON + geometry + basis files for CLI-level tests."""
    rng = np.random.default_rng(seed)
    h, w = hw
    verts = [[0, 0, 0], [4, 0, 0], [4, 5, 0], [0, 5, 0],
             [0, 0, 3], [4, 0, 3], [4, 5, 3], [0, 5, 3]]
    faces = [[0, 2, 1], [0, 3, 2],  # floor
             [4, 5, 6], [4, 6, 7],  # ceiling
             [0, 1, 5], [0, 5, 4],  # y=0 wall
             [2, 3, 7], [2, 7, 6]]  # y=5 wall
    geom_path = tmp_path / "room.json"
    geom_path.write_text(json.dumps({"vertices": verts, "faces": faces}))
    pts = [[x, 5.0, z] for x in (0.5, 1.5, 2.5, 3.5) for z in (0.8, 1.6, 2.4)]
    basis_path = tmp_path / "basis.json"
    basis_path.write_text(json.dumps({"voxel_size": 1.0, "points": pts}))
    img_dir = tmp_path / "imgs"
    img_dir.mkdir(exist_ok=True)
    cams = []
    for i in range(n_views):
        img = (rng.random((h, w, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(img_dir / f"v{i}.png")
        p = look_at((2.0 + 0.3 * i, 0.5, 1.5), (0.0, 1.0, 0.0))
        cams.append({"file": f"v{i}.png",
                     "K": center_K(w, h).reshape(-1).tolist(),
                     "P": p.reshape(-1).tolist()})
    cam_path = tmp_path / "cameras.json"
    cam_path.write_text(json.dumps(cams))
    return img_dir, cam_path, geom_path, basis_path


# ---------------------------------------------------------------------------
# scene loading and ray casting
# ---------------------------------------------------------------------------


class TestScene:
    def test_load_scene_roundtrip(self, tmp_path):
        sc = quad_scene()
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"vertices": sc.vertices.tolist(),
                                 "faces": sc.faces.tolist()}))
        sc2 = vf.load_scene(p)
        assert np.array_equal(sc2.vertices, sc.vertices)
        assert np.array_equal(sc2.faces, sc.faces)

    def test_bad_scene_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"vertices": [[0, 0, 0]], "faces": [[0, 0, 5]]}))
        with pytest.raises(vf.SceneError):
            vf.load_scene(p)
        p.write_text(json.dumps({"faces": [[0, 1, 2]]}))
        with pytest.raises(vf.SceneError):
            vf.load_scene(p)

    def test_load_basis(self, tmp_path):
        p = tmp_path / "b.json"
        p.write_text(json.dumps({"voxel_size": 0.5,
                                 "points": [[0, 0, 0], [1, 2, 3]]}))
        pts = vf.load_basis(p)
        assert pts.shape == (2, 3)
        p.write_text(json.dumps({"voxel_size": 0.5, "points": [[1, 2]]}))
        with pytest.raises(vf.SceneError):
            vf.load_basis(p)

    def test_occluder_blocks_shadow(self):
        # rays from the origin through the |x|,|y|<=0.5 plate at z=2 are
        # blocked exactly when the target at z=4 lies in |x|,|y| <= 1
        sc = quad_scene(z=2.0, half=0.5)
        xs = np.linspace(-1.8, 1.8, 13)
        targets = np.array([[x, y, 4.0] for x in xs for y in xs])
        clear = vf.segments_clear(sc, np.zeros(3), targets)
        expect = ~((np.abs(targets[:, 0]) <= 1.0 - 1e-9)
                   & (np.abs(targets[:, 1]) <= 1.0 - 1e-9))
        assert np.array_equal(clear, expect)

    def test_target_on_mesh_not_self_occluded(self):
        sc = quad_scene(z=2.0, half=0.5)
        on_face = np.array([[0.1, 0.2, 2.0], [-0.3, 0.3, 2.0]])
        assert vf.segments_clear(sc, np.zeros(3), on_face).all()

    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(5)
        verts = rng.normal(size=(30, 3))
        faces = rng.integers(0, 30, size=(18, 3))
        faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                      & (faces[:, 0] != faces[:, 2])]
        sc = vf.Scene(verts, faces)
        origin = rng.normal(size=3) * 2
        targets = rng.normal(size=(40, 3)) * 2
        got = vf.segments_clear(sc, origin, targets)
        want = [not any(_ray_tri(origin, t, verts[f[0]], verts[f[1]],
                                 verts[f[2]]) for f in faces)
                for t in targets]
        assert np.array_equal(got, np.asarray(want))


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


class TestImages:
    def test_load_png_and_npy(self, tmp_path):
        arr = (np.arange(24).reshape(2, 4, 3) * 10).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "a.png")
        px = vf.load_image(tmp_path / "a.png")
        assert px.shape == (2, 4, 3) and np.allclose(px, arr / 255.0)
        np.save(tmp_path / "b.npy", arr / 255.0)
        assert np.allclose(vf.load_image(tmp_path / "b.npy"), arr / 255.0)

    def test_grayscale_promoted(self, tmp_path):
        np.save(tmp_path / "g.npy", np.ones((3, 5)) * 0.5)
        px = vf.load_image(tmp_path / "g.npy")
        assert px.shape == (3, 5, 3) and np.allclose(px, 0.5)

    def test_singular_intrinsics_rejected(self):
        with pytest.raises(vf.ImageError):
            vf.CalibratedImage(np.zeros((4, 4, 3)), np.zeros((3, 3)),
                               np.zeros((3, 4)))

    def test_load_cameras(self, tmp_path):
        _, cam_path, _, _ = toy_setup(tmp_path)
        cams = vf.load_cameras(cam_path, tmp_path / "imgs")
        assert len(cams) == 2 and cams[0].shape == (40, 56)
        assert cams[0].intrinsics.shape == (3, 3)

    def test_missing_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps([{"file": "x.png"}]))
        with pytest.raises(vf.ImageError):
            vf.load_cameras(p, tmp_path)


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


class TestFeatures:
    def test_identical_images_identical_maps(self):
        rng = np.random.default_rng(1)
        img = rng.random((16, 20, 3))
        a = vf.extract_feature_map(img)
        b = vf.extract_feature_map(img.copy())
        assert np.array_equal(a, b)

    def test_spatial_dims_match_input(self):
        for h, w in ((8, 8), (16, 24), (33, 17)):
            f = vf.extract_feature_map(np.zeros((h, w, 3)))
            assert f.shape[:2] == (h, w)

    def test_feature_dim_and_finite(self):
        f = vf.extract_feature_map(np.random.default_rng(2).random((12, 12, 3)))
        assert f.shape[2] == 36 and np.isfinite(f).all()

    def test_constant_image_zero_gradients(self):
        f = vf.extract_feature_map(np.full((10, 10, 3), 0.3))
        # smoothed channels stay at 0.3, all gradient channels vanish
        assert np.allclose(f[:, :, 0:3], 0.3, atol=1e-12)
        assert np.allclose(f[:, :, 3:9], 0.0, atol=1e-12)

    def test_unknown_backbone(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            vf.extract_feature_map(np.zeros((4, 4, 3)), backbone="nope")


# ---------------------------------------------------------------------------
# projection and sampling
# ---------------------------------------------------------------------------


class TestProjection:
    def test_principal_point_example(self):
        # identity extrinsics, point (0,0,1): projects to the principal
        # point, i.e. the image center, and samples that pixel exactly
        h, w = 21, 31
        img = vf.CalibratedImage(np.zeros((h, w, 3)), center_K(w, h),
                                 np.hstack([np.eye(3), np.zeros((3, 1))]))
        fmap = np.zeros((h, w, 1))
        fmap[h // 2, w // 2, 0] = 7.0
        sc = quad_scene(z=50.0)  # far away, no occlusion
        feats, vis = vf.project_and_sample([[0.0, 0.0, 1.0]], img, sc, fmap)
        assert vis[0] and feats[0, 0] == pytest.approx(7.0)

    def test_point_behind_camera_hidden(self):
        img = vf.CalibratedImage(np.zeros((9, 9, 3)), center_K(9, 9),
                                 np.hstack([np.eye(3), np.zeros((3, 1))]))
        fmap = np.ones((9, 9, 2))
        feats, vis = vf.project_and_sample([[0, 0, -1.0]], img, quad_scene(50),
                                           fmap)
        assert not vis[0] and np.all(feats[0] == 0.0)

    def test_out_of_frame_hidden(self):
        img = vf.CalibratedImage(np.zeros((9, 9, 3)), center_K(9, 9, f=200.0),
                                 np.hstack([np.eye(3), np.zeros((3, 1))]))
        _, vis = vf.project_and_sample([[1.0, 0.0, 1.0]], img, quad_scene(50),
                                       np.ones((9, 9, 1)))
        assert not vis[0]

    def test_occluded_by_plane_hidden(self):
        img = vf.CalibratedImage(np.zeros((15, 15, 3)), center_K(15, 15, f=15.0),
                                 np.hstack([np.eye(3), np.zeros((3, 1))]))
        fmap = np.ones((15, 15, 1))
        sc = quad_scene(z=2.0, half=0.5)
        pts = [[0.0, 0.0, 4.0],   # behind the plate -> hidden
               [1.5, 1.5, 4.0]]   # misses the plate -> visible
        feats, vis = vf.project_and_sample(pts, img, sc, fmap)
        assert not vis[0] and np.all(feats[0] == 0.0)
        assert vis[1] and feats[1, 0] == pytest.approx(1.0)

    def test_camera_center(self):
        c = np.array([1.0, -2.0, 0.5])
        p = look_at(c, (0.3, 1.0, -0.2))
        assert np.allclose(vf.camera_center(p), c, atol=1e-12)

    def test_bilinear_exact_and_midpoint(self):
        grid = np.arange(12, dtype=float).reshape(3, 4, 1)
        at = vf.bilinear_sample(grid, np.array([[2.0, 1.0]]))
        assert at[0, 0] == pytest.approx(grid[1, 2, 0])
        mid = vf.bilinear_sample(grid, np.array([[1.5, 0.5]]))
        want = (grid[0, 1, 0] + grid[0, 2, 0] + grid[1, 1, 0]
                + grid[1, 2, 0]) / 4
        assert mid[0, 0] == pytest.approx(want)


# ---------------------------------------------------------------------------
# PCA reduction
# ---------------------------------------------------------------------------


class TestPCA:
    def test_full_dim_exact_reconstruction(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 6))
        red, comp, mean = vf.reduce_dim(x, 6)
        assert np.allclose(comp @ comp.T, np.eye(6), atol=1e-10)
        assert np.allclose(red @ comp + mean, x, atol=1e-10)

    def test_explained_variance_monotone(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(80, 10)) * np.arange(1, 11)
        evs = [vf.explained_variance(x, d) for d in range(1, 11)]
        assert all(b >= a - 1e-12 for a, b in zip(evs, evs[1:]))
        assert evs[-1] == pytest.approx(1.0)

    def test_roundtrip_through_saved_matrix(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 8))
        red, comp, mean = vf.reduce_dim(x, 3)
        again = vf.transform(x, np.asarray(comp.tolist()),
                             np.asarray(mean.tolist()))
        assert np.array_equal(red, again)

    def test_rank_deficiency(self):
        x = np.outer(np.arange(20.0), np.ones(5))  # rank 1 centered -> rank 1
        with pytest.raises(vf.RankError):
            vf.fit_pca(x, 3)
        with pytest.raises(vf.RankError):
            vf.fit_pca(np.random.default_rng(0).normal(size=(2, 5)), 4)

    def test_sign_convention(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(60, 5))
        comp, _ = vf.fit_pca(x, 5)
        comp2, _ = vf.fit_pca(-x + x.mean(axis=0) * 2, 5)  # reflected corpus
        idx = np.abs(comp).argmax(axis=1)
        assert (comp[np.arange(5), idx] > 0).all()
        assert (comp2[np.arange(5), np.abs(comp2).argmax(axis=1)] > 0).all()


# ---------------------------------------------------------------------------
# bank writing and the CLI
# ---------------------------------------------------------------------------


class TestBank:
    def _tensors(self, seed=0, n_s=7, n_c=3, d_v=4):
        rng = np.random.default_rng(seed)
        feat = rng.normal(size=(n_s, n_c, d_v)).astype(np.float32)
        vis = rng.random((n_s, n_c)) < 0.7
        feat[~vis] = 0.0
        ext = rng.normal(size=(n_c, 12)).astype(np.float32)
        return feat, vis, ext

    def test_header_matches_payload(self, tmp_path):
        feat, vis, ext = self._tensors()
        p = tmp_path / "b.avdf"
        vf.write_bank(p, feat, vis, ext)
        raw = p.read_bytes()
        assert raw[:4] == b"AVDF"
        ver, n_s, n_c, d_v = struct.unpack_from("<IIII", raw, 4)
        assert (ver, n_s, n_c, d_v) == (1, 7, 3, 4)
        expect = 20 + 4 * (12 * n_c + n_s * n_c * d_v) + (n_s * n_c + 7) // 8
        assert len(raw) == expect

    def test_primary_loader_roundtrip(self, tmp_path):
        from beamrir.reflection import load_feature_bank
        feat, vis, ext = self._tensors(seed=2)
        p = tmp_path / "b.avdf"
        vf.write_bank(p, feat, vis, ext)
        bank = load_feature_bank(p)
        assert np.array_equal(bank.features.astype(np.float32), feat)
        assert np.array_equal(bank.visible, vis)
        assert np.array_equal(bank.extrinsics.astype(np.float32), ext)

    def test_truncated_rejected_by_primary_loader(self, tmp_path):
        from beamrir.reflection import FeatureBankError, load_feature_bank
        feat, vis, ext = self._tensors(seed=3)
        p = tmp_path / "b.avdf"
        vf.write_bank(p, feat, vis, ext)
        (tmp_path / "t.avdf").write_bytes(p.read_bytes()[:-9])
        with pytest.raises(FeatureBankError, match="truncated"):
            load_feature_bank(tmp_path / "t.avdf")

    def test_shape_mismatch_rejected(self, tmp_path):
        feat, vis, ext = self._tensors()
        with pytest.raises(ValueError):
            vf.write_bank(tmp_path / "x.avdf", feat, vis[:-1], ext)

    def test_extract_deterministic(self, tmp_path):
        img_dir, cam_path, geom_path, basis_path = toy_setup(tmp_path)
        scene = vf.load_scene(geom_path)
        basis = vf.load_basis(basis_path)
        cams = vf.load_cameras(cam_path, img_dir)
        outs = []
        for name in ("a.avdf", "b.avdf"):
            feat, vis, ext, comp, mean = vf.extract_bank(scene, basis, cams,
                                                         dim=5)
            vf.write_bank(tmp_path / name, feat, vis, ext,
                          vf.make_sidecar("multiscale", comp, mean))
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        assert (tmp_path / "a.avdf.json").exists()

    def test_cli_extract(self, tmp_path, capsys):
        from beamrir.reflection import load_feature_bank
        img_dir, cam_path, geom_path, basis_path = toy_setup(tmp_path)
        out = tmp_path / "bank.avdf"
        rc = vf_main(["extract", "--images", str(img_dir),
                      "--cameras", str(cam_path),
                      "--geometry", str(geom_path),
                      "--basis", str(basis_path),
                      "--dim", "6", "--out", str(out)])
        assert rc == 0 and "wrote" in capsys.readouterr().out
        bank = load_feature_bank(out)
        assert bank.feature_dim == 6 and bank.n_views == 2
        assert np.all(bank.features[~bank.visible] == 0.0)
        side = json.loads((tmp_path / "bank.avdf.json").read_text())
        assert side["backbone"] == "multiscale"
        assert np.asarray(side["projection"]).shape == (6, 36)

    def test_cli_missing_input(self, tmp_path, capsys):
        rc = vf_main(["extract", "--images", str(tmp_path),
                      "--cameras", str(tmp_path / "none.json"),
                      "--geometry", str(tmp_path / "none2.json"),
                      "--basis", str(tmp_path / "none3.json"),
                      "--out", str(tmp_path / "o.avdf")])
        assert rc == 1 and "error:" in capsys.readouterr().err
