import json
import os

import numpy as np
import pytest
from scipy import ndimage

from ctxisp import data as D
from ctxisp.raw import BayerImage, demosaic_bilinear, make_guide, pack_rggb

IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
CLEAN = D.SceneParams(noise=False)


@pytest.fixture(scope="module")
def clean_scenes():
    return D.generate_scenes(3, 256, 256, seed=11, params=CLEAN)


# --- file formats ------------------------------------------------------------

def test_pgm_roundtrip_16bit(tmp_path):
    plane = np.random.default_rng(0).integers(0, 65536, (6, 10)).astype(np.uint16)
    D.write_pgm(tmp_path / "a.pgm", plane)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n10 6\n65535\n")
    assert raw[len(b"P5\n10 6\n65535\n"):][:2] == int(plane[0, 0]).to_bytes(2, "big")
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "a.pgm"), plane)


def test_pgm_8bit_and_header_comments(tmp_path):
    plane = np.arange(12, dtype=np.uint8).reshape(3, 4)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n4 3\n# levels\n255\n" + plane.tobytes())
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "c.pgm"), plane)
    D.write_pgm(tmp_path / "d.pgm", plane, maxval=255)
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "d.pgm"), plane)


def test_pgm_errors(tmp_path):
    with pytest.raises(ValueError):
        D.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        D.write_pgm(tmp_path / "x.pgm", np.full((2, 2), 300), maxval=255)
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n65535\n\x00\x01")
    with pytest.raises(ValueError, match="truncated"):
        D.read_pgm(tmp_path / "t.pgm")
    (tmp_path / "p.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="binary PGM"):
        D.read_pgm(tmp_path / "p.pgm")


def test_png_roundtrip_16bit(tmp_path):
    rgb = np.random.default_rng(1).random((3, 5, 7))
    D.write_png(tmp_path / "a.png", rgb)
    back = D.read_png(tmp_path / "a.png")
    assert back.shape == (3, 5, 7)
    assert np.max(np.abs(back - rgb)) <= 0.5 / 65535 + 1e-7
    # channel order survives (red stays in channel 0)
    red = np.zeros((3, 2, 2))
    red[0] = 1.0
    D.write_png(tmp_path / "r.png", red)
    np.testing.assert_array_equal(D.read_png(tmp_path / "r.png"), red)


def test_read_png_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.read_png(tmp_path / "nope.png")


# --- generator -----------------------------------------------------------------

def test_identity_pipeline_equals_bilinear_demosaic():
    params = D.SceneParams(gains=(1.0, 1.0, 1.0), ccm=IDENTITY, gamma=False, noise=False)
    scene = D.synth_scene_generate(3, 256, 256, params)
    np.testing.assert_array_equal(scene.rgb, demosaic_bilinear(scene.bayer).astype(np.float32))


def test_metadata_reproduces_rgb(clean_scenes):
    for scene in clean_scenes:
        again = D.oracle_isp(demosaic_bilinear(scene.bayer), scene.meta)
        assert np.max(np.abs(again - scene.rgb)) <= 1e-6


def ideal_isp(demosaiced, gains, ccm):
    """Hand-written white balance, colour matrix and sRGB curve."""
    x = demosaiced / np.asarray(gains)[:, None, None]
    x = np.tensordot(np.asarray(ccm), x, axes=1)
    x = np.clip(x, 0, 1)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def test_oracle_consistency_psnr(clean_scenes):
    for scene in clean_scenes:
        out = ideal_isp(demosaic_bilinear(scene.bayer), scene.meta["gains"], scene.meta["ccm"])
        mse = np.mean((out - scene.rgb) ** 2)
        assert mse == 0 or 10 * np.log10(1 / mse) >= 50.0


def test_generator_determinism_and_gain_range():
    a = D.synth_scene_generate(5, 256, 256)
    b = D.synth_scene_generate(5, 256, 256)
    c = D.synth_scene_generate(6, 256, 256)
    assert a.bayer.plane.tobytes() == b.bayer.plane.tobytes()
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.meta["gains"] != c.meta["gains"]
    for g in (a.meta["gains"], c.meta["gains"]):
        assert g[1] == 1.0
        assert D.GAIN_RANGE[0] <= g[0] <= D.GAIN_RANGE[1]
        assert D.GAIN_RANGE[0] <= g[2] <= D.GAIN_RANGE[1]


def test_generator_noise_statistics():
    # stored minus clean mosaic has roughly the configured read noise in dark regions
    noisy = D.synth_scene_generate(7, 256, 256)
    clean = D.synth_scene_generate(7, 256, 256, CLEAN)
    span = noisy.bayer.white_level - noisy.bayer.black_level[0]
    diff = (noisy.bayer.plane.astype(float) - clean.bayer.plane.astype(float)) / span
    assert 0.5 * 0.003 < diff.std() < 0.05


@pytest.mark.parametrize("h, w", [(255, 256), (256, 257), (128, 256)])
def test_generator_rejects_bad_dims(h, w):
    with pytest.raises(ValueError):
        D.synth_scene_generate(0, h, w)


# --- patches -------------------------------------------------------------------

def test_patch_grid_896():
    scene = D.synth_scene_generate(1, 896, 896, CLEAN)
    patches = D.extract_patches(scene, 448, 448)
    assert [(p.y, p.x) for p in patches] == [(0, 0), (0, 448), (448, 0), (448, 448)]
    for p in patches:
        assert p.bayer.plane.tobytes() == scene.bayer.plane[p.y:p.y + 448, p.x:p.x + 448].tobytes()
        np.testing.assert_array_equal(p.rgb, scene.rgb[:, p.y:p.y + 448, p.x:p.x + 448])


def test_patch_grid_floor_and_too_small():
    scene = D.synth_scene_generate(2, 500, 500, CLEAN)
    assert len(D.extract_patches(scene, 448)) == 1
    assert D.extract_patches(scene, 512) == []
    with pytest.raises(ValueError):
        D.extract_patches(scene, 447)


def test_guide_from_reassembled_patches(clean_scenes):
    scene = clean_scenes[0]
    patches = D.extract_patches(scene, 128)
    plane = np.zeros_like(scene.bayer.plane)
    for p in patches:
        plane[p.y:p.y + 128, p.x:p.x + 128] = p.bayer.plane
    rebuilt = BayerImage(plane, scene.bayer.black_level, scene.bayer.white_level)
    np.testing.assert_array_equal(make_guide(pack_rggb(rebuilt), 64, 64), scene.guide((64, 64)))


# --- correlation and alignment ----------------------------------------------------

def test_ncc_examples():
    x = np.random.default_rng(3).random((3, 64, 64))
    assert D.ncc(x, x) == pytest.approx(1.0, abs=1e-12)
    assert D.ncc(x, 0.7 - x) == pytest.approx(-1.0, abs=1e-12)
    assert D.ncc(np.ones((8, 8)), np.random.default_rng(0).random((8, 8))) == 0.0


def test_ncc_shuffled_is_near_zero():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.random((64, 64))
        shuffled = rng.permutation(x.ravel()).reshape(x.shape)
        assert abs(D.ncc(x, shuffled)) < 0.1


def smooth_image(seed, size=64):
    rng = np.random.default_rng(seed)
    return np.stack([ndimage.gaussian_filter(rng.random((size, size)), 2.0) for _ in range(3)])


def test_align_identical():
    x = smooth_image(0)
    dx, dy, score = D.align_translation(x, x)
    assert (dx, dy) == (0, 0)
    assert score == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shift", [(3, -2), (-5, 4), (0, 7)])
def test_align_recovers_shift(shift):
    dx, dy = shift
    proxy = smooth_image(1)
    h, w = proxy.shape[1:]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    target = proxy[:, rows][:, :, cols]
    got = D.align_translation(proxy, target, max_shift=8)
    assert got[:2] == (dx, dy)


def test_align_noise_pair_rejected():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        _, _, score = D.align_translation(rng.random((32, 32)), rng.random((32, 32)), max_shift=4)
        assert score < 0.5


# --- splits and manifests ------------------------------------------------------------

def test_split_counts():
    tags = D.split_scenes(10, 0.9, 0)
    assert tags.count("train") == 9 and tags.count("test") == 1
    assert sorted(D.split_scenes(2, 0.9, 0)) == ["test", "train"]
    assert D.split_scenes(10, 0.9, 0) == tags
    with pytest.raises(ValueError):
        D.split_scenes(1, 0.9, 0)


def test_build_dataset_and_reload(tmp_path, clean_scenes):
    m = D.build_dataset(clean_scenes, tmp_path / "ds", split_ratio=0.5, patch_size=128, seed=4)
    # every noise-free patch passes the correlation filter
    assert len(m.patches) == len(clean_scenes) * 4
    assert all(p["ncc"] > 0.95 for p in m.patches)
    train_ids = {s["scene_id"] for s in m.scene_split("train")}
    test_ids = {s["scene_id"] for s in m.scene_split("test")}
    assert train_ids and test_ids and not train_ids & test_ids
    for p in m.patches:
        assert p["split"] == ("train" if p["scene_id"] in train_ids else "test")

    again = D.Manifest.load(tmp_path / "ds" / "manifest.json")
    assert again.patches == m.patches and again.scenes == m.scenes
    loaded = again.load_scene(again.scenes[0])
    original = next(s for s in clean_scenes if s.scene_id == loaded.scene_id)
    assert loaded.bayer.plane.tobytes() == original.bayer.plane.tobytes()
    assert np.max(np.abs(loaded.rgb - original.rgb)) <= 0.5 / 65535 + 1e-7

    ds1 = D.PatchDataset.from_manifest(again, "train", guide_size=(32, 32))
    ds2 = D.PatchDataset.from_manifest(D.Manifest.load(tmp_path / "ds" / "manifest.json"), "train",
                                       guide_size=(32, 32))
    assert ds1.ids == ds2.ids
    np.testing.assert_array_equal(ds1.inputs, ds2.inputs)


def test_build_dataset_is_deterministic(tmp_path, clean_scenes):
    D.build_dataset(clean_scenes[:2], tmp_path / "a", patch_size=128, seed=1)
    D.build_dataset(clean_scenes[:2], tmp_path / "b", patch_size=128, seed=1)
    assert (tmp_path / "a/manifest.json").read_bytes().replace(b"/a", b"") == \
        (tmp_path / "b/manifest.json").read_bytes().replace(b"/b", b"")
    for name in sorted(os.listdir(tmp_path / "a/patches"))[:4]:
        assert (tmp_path / "a/patches" / name).read_bytes() == (tmp_path / "b/patches" / name).read_bytes()


def test_build_dataset_errors(tmp_path, clean_scenes):
    with pytest.raises(ValueError, match="at least 2"):
        D.build_dataset(clean_scenes[:1], tmp_path / "one", patch_size=128)
    with pytest.raises(ValueError, match="survived"):
        D.build_dataset(clean_scenes[:2], tmp_path / "none", patch_size=128, ncc_threshold=1.0)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        D.build_dataset(clean_scenes[:2], blocker / "sub", patch_size=128)


def test_build_dataset_with_alignment_undoes_shift(tmp_path, clean_scenes):
    scene = clean_scenes[0]
    rows = np.clip(np.arange(256) - 2, 0, 255)
    cols = np.clip(np.arange(256) + 3, 0, 255)
    shifted = D.ScenePair(scene.scene_id, scene.bayer, scene.rgb[:, rows][:, :, cols], scene.meta)
    m = D.build_dataset([shifted, clean_scenes[1]], tmp_path / "al", patch_size=128, align=True, max_shift=6)
    back = m.load_scene(next(s for s in m.scenes if s["scene_id"] == scene.scene_id))
    interior = (slice(None), slice(8, -8), slice(8, -8))
    assert np.max(np.abs(back.rgb[interior] - scene.rgb[interior])) <= 1e-4


def test_manifest_rejects_dangling_patch(tmp_path):
    doc = {"version": D.MANIFEST_VERSION, "info": {}, "scenes": [],
           "patches": [{"patch_id": "p", "scene_id": "ghost"}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="unknown scene"):
        D.Manifest.load(tmp_path / "m.json")
    doc["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        D.Manifest.load(tmp_path / "m.json")


def test_patch_dataset_guides(clean_scenes):
    ds = D.PatchDataset.from_scenes(clean_scenes[:1], 128, guide_size=(32, 32))
    assert ds.inputs.shape == (4, 3, 128, 128)
    assert ds.full_guides.shape == ds.patch_guides.shape == (4, 4, 32, 32)
    # the full-image guide is shared by all patches of a scene, the patch guide is not
    assert all(np.array_equal(ds.full_guides[0], g) for g in ds.full_guides)
    assert not np.array_equal(ds.patch_guides[0], ds.patch_guides[1])
    with pytest.raises(ValueError):
        ds.guides("both")
    sub = ds.subset([2, 0])
    assert sub.ids == [ds.ids[2], ds.ids[0]]
