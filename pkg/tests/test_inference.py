import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from conftest import random_stack
from oracles import per_patch_inference, window_scan
from patchmask import inference, resnet
from patchmask.errors import ConfigurationError
from patchmask.scene import CLEAR, CLOUD_SHADOW, NODATA, MaskRaster


def test_single_window_scene(rng, tiny_params):
    out = inference.infer_scene(random_stack(rng, 15, 15), params=tiny_params)
    assert out.shape == (15, 15)
    defined = out.labels != NODATA
    assert defined.sum() == 1 and defined[7, 7]


@pytest.mark.parametrize("h,w", [(20, 20), (31, 17)])
def test_border_is_nodata(rng, tiny_params, h, w):
    out = inference.infer_scene(random_stack(rng, h, w), params=tiny_params)
    assert (out.labels != NODATA).sum() == (h - 14) * (w - 14)
    assert (out.labels[:7] == NODATA).all() and (out.labels[:, -7:] == NODATA).all()
    assert np.isnan(out.confidence[out.labels == NODATA]).all()


def test_matches_per_patch_oracle(rng, tiny_params):
    nd = rng.random((26, 24)) < 0.01
    scene = random_stack(rng, 26, 24, nodata=nd)
    labels, conf = per_patch_inference(tiny_params, scene, 0.5, resnet.forward)
    out = inference.infer_scene(scene, inference.InferenceConfig(tile_size=37), params=tiny_params)
    assert out.labels.tobytes() == labels.tobytes()
    assert out.confidence.tobytes() == conf.tobytes()
    assert [tuple(p) for p in np.argwhere(out.labels != NODATA)] == window_scan(nd)


def test_tile_and_thread_invariance(rng, tiny_params):
    scene = random_stack(rng, 40, 36, nodata=rng.random((40, 36)) < 0.005)
    ref = inference.infer_scene(scene, inference.InferenceConfig(tile_size=2048), params=tiny_params)
    for tile, threads in [(1, 1), (7, 3), (100, 2), (5000, 4)]:
        got = inference.infer_scene(scene, inference.InferenceConfig(tile_size=tile, threads=threads),
                                    params=tiny_params)
        assert got.labels.tobytes() == ref.labels.tobytes()
        assert got.confidence.tobytes() == ref.confidence.tobytes()


def test_threshold_tie_goes_to_cloud():
    conf = np.array([[0.5, np.nextafter(np.float32(0.5), np.float32(0)), np.nan]], np.float32)
    assert inference.apply_threshold(conf, 0.5).tolist() == [[CLOUD_SHADOW, CLEAR, NODATA]]


@pytest.mark.parametrize("t", [0.0, 1.0, -0.2, 1.5])
def test_threshold_range(t):
    with pytest.raises(ConfigurationError):
        inference.apply_threshold(np.zeros(3), t)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(0, 2**31))
def test_threshold_monotone(t1, t2, seed):
    lo, hi = sorted((t1, t2))
    conf = np.random.default_rng(seed).random((8, 8)).astype(np.float32)
    a = inference.apply_threshold(conf, lo) == CLOUD_SHADOW
    b = inference.apply_threshold(conf, hi) == CLOUD_SHADOW
    assert (b <= a).all()


def test_rethreshold_equals_fresh_inference(rng, tiny_params):
    scene = random_stack(rng, 24, 24)
    stored = inference.infer_scene(scene, params=tiny_params)
    for t in (0.2, 0.5, 0.8):
        fresh = inference.infer_scene(scene, inference.InferenceConfig(threshold=t), params=tiny_params)
        assert inference.rethreshold(stored, t).labels.tobytes() == fresh.labels.tobytes()
    with pytest.raises(ConfigurationError):
        inference.rethreshold(MaskRaster(np.zeros((3, 3), np.uint8)), 0.5)


def test_channel_mismatch(rng, tiny_params):
    scene = random_stack(rng, 20, 20, bands=("red", "green"))
    with pytest.raises(ConfigurationError, match="input channels"):
        inference.infer_scene(scene, params=tiny_params)


def test_palette_and_png(tmp_path, rng):
    mask = MaskRaster(np.array([[0, 1], [255, 0]], np.uint8))
    rgb = inference.mask_to_rgb(mask)
    assert rgb[0, 0].tolist() == [128] * 3 and rgb[0, 1].tolist() == [255] * 3 and rgb[1, 0].tolist() == [0] * 3
    scene = random_stack(rng, 2, 2)
    written = inference.render_png(mask, str(tmp_path / "m.png"), scene=scene)
    assert len(written) == 2
    for p in written:
        img = Image.open(p)
        assert img.size == (2, 2) and img.mode == "RGB"
    np.testing.assert_array_equal(np.asarray(Image.open(written[0])), rgb)


def test_rgb_needs_bands(rng):
    with pytest.raises(ConfigurationError):
        inference.rgb_composite(random_stack(rng, 5, 5, bands=("red", "nir")))


def test_rgb_composite_nodata_black(rng):
    nd = np.zeros((6, 6), bool)
    nd[0, 0] = True
    rgb = inference.rgb_composite(random_stack(rng, 6, 6, nodata=nd))
    assert rgb[0, 0].tolist() == [0, 0, 0] and rgb.dtype == np.uint8


def test_missing_checkpoint():
    with pytest.raises(ConfigurationError):
        inference.infer_scene(None, inference.InferenceConfig())
