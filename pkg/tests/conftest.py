import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from patchmask import resnet  # noqa: E402
from patchmask.scene import BAND_NAMES, BandStack, MaskRaster  # noqa: E402


def random_stack(rng, h, w, bands=BAND_NAMES, nodata=None):
    data = rng.uniform(0.0, 0.6, size=(len(bands), h, w)).astype(np.float32)
    nd = np.zeros((h, w), bool) if nodata is None else nodata
    data[:, nd] = 0.0
    return BandStack(data, tuple(bands), nd)


def random_mask(rng, h, w, with_confidence=True, nodata_fraction=0.1):
    labels = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
    nodata = rng.random((h, w)) < nodata_fraction
    labels[nodata] = 255
    conf = None
    if with_confidence:
        conf = rng.random((h, w)).astype(np.float32)
        conf[nodata] = np.nan
    return MaskRaster(labels, conf)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_params():
    cfg = resnet.NetworkConfig(depth_param_n=1, stage_widths=(4, 8, 16), input_channels=7)
    params = resnet.build(cfg, seed=3)
    # non-trivial normalization statistics so eval mode is not the identity
    r = np.random.default_rng(4)
    for key, lp in params.layers.items():
        if lp.is_norm:
            lp.running_mean = r.normal(0, 0.1, lp.running_mean.shape).astype(np.float32)
            lp.running_var = r.uniform(0.5, 1.5, lp.running_var.shape).astype(np.float32)
    return params
