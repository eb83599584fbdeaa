import numpy as np
import pytest

from patchmask import synth
from patchmask.errors import ConfigurationError
from patchmask.scene import CLOUD_SHADOW


def test_same_seed_bit_identical():
    spec = synth.SynthSpec(width=64, height=48, seed=5)
    (s1, t1), (s2, t2) = synth.generate_synthetic(spec), synth.generate_synthetic(spec)
    assert s1.data.tobytes() == s2.data.tobytes()
    assert t1.labels.tobytes() == t2.labels.tobytes()


def test_different_seeds_differ():
    a, _ = synth.generate_synthetic(synth.SynthSpec(width=32, height=32, seed=1))
    b, _ = synth.generate_synthetic(synth.SynthSpec(width=32, height=32, seed=2))
    assert a.data.tobytes() != b.data.tobytes()


def test_coverage_near_expected():
    spec = synth.SynthSpec(width=128, height=128)
    fractions = []
    for seed in range(20):
        _, truth = synth.generate_synthetic(synth.SynthSpec(width=128, height=128, seed=seed))
        fractions.append(np.mean(truth.labels == CLOUD_SHADOW))
    expected = spec.expected_coverage()
    assert abs(np.mean(fractions) - expected) <= 0.2 * expected


def test_clouds_are_bright_and_labelled():
    stack, truth = synth.generate_synthetic(synth.SynthSpec(width=96, height=96, seed=3, cloud_alpha=(1, 1)))
    clear = truth.labels == 0
    cloudy = truth.labels == CLOUD_SHADOW
    assert cloudy.any() and clear.any()
    # fully opaque clouds take the cloud profile, far above the vegetation background in blue
    blue = stack.band("blue")
    assert blue[cloudy].max() > 0.7 > blue[clear].max()


def test_nodata_border():
    stack, truth = synth.generate_synthetic(synth.SynthSpec(width=40, height=40, nodata_border=3))
    assert stack.nodata[:3].all() and stack.nodata[:, -3:].all() and not stack.nodata[3:-3, 3:-3].any()
    np.testing.assert_array_equal(stack.nodata, ~truth.valid)


@pytest.mark.parametrize("bad", [dict(width=10), dict(cloud_count=-1), dict(cloud_radius=(5, 2)),
                                 dict(background="ocean"), dict(bands=("thermal",))])
def test_invalid_spec(bad):
    with pytest.raises(ConfigurationError):
        synth.SynthSpec(**bad)
