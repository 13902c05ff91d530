import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctxisp import data as D
from ctxisp import validation as V
from ctxisp.estimator import SimpleISP
from ctxisp.raw import BayerImage, demosaic_bilinear, make_guide, pack_rggb


@pytest.fixture(scope="module")
def patches():
    scenes = D.generate_scenes(2, 256, 256, seed=9)
    return D.PatchDataset.from_scenes(scenes, 32, (16, 16)).subset(range(0, 128, 16))


def small(**kw):
    return SimpleISP(steps=3, batch_size=2, guide_size=(16, 16), **kw)


def test_params_and_clone():
    est = small(lr=3e-4)
    params = est.get_params()
    assert params["lr"] == 3e-4 and params["steps"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(w_grad=0.0)
    assert est.w_grad == 0.0


def test_fit_predict_arrays(patches):
    est = small().fit(patches.inputs, patches.targets, guides=patches.full_guides)
    assert est.n_steps_ == 3
    out = est.predict(patches.inputs, guides=patches.full_guides)
    assert out.shape == patches.inputs.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    score = est.score(patches.inputs, patches.targets, guides=patches.full_guides)
    assert np.isfinite(score)


def test_fit_is_deterministic(patches):
    a = small(seed=4).fit(patches)
    b = small(seed=4).fit(patches)
    for name in a.params_:
        np.testing.assert_array_equal(a.params_[name].data, b.params_[name].data)


def test_dataset_input_uses_guide_mode(patches):
    full = small(guide_mode="full_image").fit(patches)
    local = small(guide_mode="patch").fit(patches)
    assert not np.array_equal(full.predict(patches), local.predict(patches))
    assert full.score(patches) == pytest.approx(
        np.mean([min(_psnr(p, t), 100.0) for p, t in zip(full.predict(patches), patches.targets)]))


def _psnr(a, b):
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)


def test_predict_without_guides_uses_own_patch(patches):
    est = small().fit(patches.inputs, patches.targets)
    np.testing.assert_array_equal(est.predict(patches.inputs),
                                  est.predict(patches.inputs, guides=V.patch_guides(patches.inputs, (16, 16))))


def test_errors(patches):
    with pytest.raises(NotFittedError):
        small().predict(patches.inputs)
    with pytest.raises(ValueError, match="y is required"):
        small().fit(patches.inputs)
    with pytest.raises(ValueError, match="shapes differ"):
        small().fit(patches.inputs, patches.targets[:, :, :16])
    with pytest.raises(ValueError):
        small(guide_mode="global").fit(patches)
    bad = patches.inputs.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        small().fit(bad, patches.targets)
    with pytest.raises(ValueError, match="guides"):
        small().fit(patches.inputs, patches.targets, guides=patches.full_guides[:3])


def test_check_images_shapes():
    assert V.check_images(np.zeros((3, 4, 4))).shape == (1, 3, 4, 4)
    with pytest.raises(ValueError):
        V.check_images(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ValueError):
        V.check_images(np.zeros((0, 3, 4, 4)))
    with pytest.raises(ValueError, match="16x16"):
        V.check_guides(np.zeros((1, 4, 8, 8)), 1, (16, 16))


def test_remosaic_recovers_packed_raw():
    plane = np.random.default_rng(0).integers(64, 1024, (16, 20))
    bayer = BayerImage(plane, 64, 1023)
    packed = pack_rggb(bayer)
    back = V.remosaic_packed(demosaic_bilinear(bayer)[None])[0]
    np.testing.assert_allclose(back, packed, atol=1e-6)
    np.testing.assert_allclose(V.patch_guides(demosaic_bilinear(bayer)[None], (4, 5))[0],
                               make_guide(packed, 4, 5), atol=1e-6)
    with pytest.raises(ValueError):
        V.remosaic_packed(np.zeros((1, 3, 5, 4)))
