import numpy as np
import pytest

from patchmask import resnet
from patchmask.errors import ChecksumError, ConfigurationError, ContractViolation, MagicError, TruncationError

ARCHITECTURE_TRACE = [("stem", (16, 15, 15)), ("stage1", (16, 15, 15)), ("stage2", (32, 8, 8)),
                      ("stage3", (64, 4, 4)), ("pool", (64,)), ("fc", (2,)), ("softmax", (2,))]


@pytest.mark.parametrize("n,depth", [(3, 20), (5, 32), (7, 44), (9, 56)])
def test_weighted_layer_count(n, depth):
    params = resnet.build(resnet.NetworkConfig(depth_param_n=n), seed=0)
    assert params.weighted_layer_count() == depth == params.config.depth


def test_shape_trace_matches_architecture_table():
    assert resnet.shape_trace(resnet.NetworkConfig()) == ARCHITECTURE_TRACE


def test_projection_shortcuts_only_at_stage_transitions():
    keys = [p[0] for p in resnet.layer_plan(resnet.NetworkConfig(depth_param_n=3))]
    shortcuts = [k for k in keys if "shortcut.conv" in k]
    assert shortcuts == ["stage2.block0.shortcut.conv", "stage3.block0.shortcut.conv"]


@pytest.mark.parametrize("bad", [dict(depth_param_n=0), dict(depth_param_n=2.5), dict(input_channels=9),
                                 dict(input_extent=14), dict(num_classes=3), dict(dropout_keep=0.0)])
def test_invalid_config(bad):
    with pytest.raises(ConfigurationError):
        resnet.NetworkConfig(**bad)


def test_build_deterministic():
    a = resnet.build(resnet.NetworkConfig(), seed=7)
    b = resnet.build(resnet.NetworkConfig(), seed=7)
    for (na, xa), (nb, xb) in zip(a.named_arrays(True).items(), b.named_arrays(True).items()):
        assert na == nb and xa.tobytes() == xb.tobytes()


def test_forward_rows_are_distributions(tiny_params, rng):
    x = rng.uniform(0, 0.5, (5, 7, 15, 15)).astype(np.float32)
    p = resnet.forward(tiny_params, x)
    assert p.shape == (5, 2)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)


def test_forward_eval_deterministic(tiny_params, rng):
    x = rng.uniform(0, 0.5, (4, 7, 15, 15)).astype(np.float32)
    assert resnet.forward(tiny_params, x).tobytes() == resnet.forward(tiny_params, x).tobytes()


def test_forward_permutation_equivariant(tiny_params, rng):
    x = rng.uniform(0, 0.5, (6, 7, 15, 15)).astype(np.float32)
    perm = rng.permutation(6)
    np.testing.assert_array_equal(resnet.forward(tiny_params, x)[perm], resnet.forward(tiny_params, x[perm]))


@pytest.mark.parametrize("shape", [(2, 7, 13, 13), (2, 6, 15, 15), (7, 15, 15)])
def test_forward_bad_input(tiny_params, shape):
    with pytest.raises(ContractViolation):
        resnet.forward(tiny_params, np.zeros(shape, np.float32))


def test_zeroed_residual_branches_pass_stem_through(rng):
    cfg = resnet.NetworkConfig(depth_param_n=2, stage_widths=(8, 16, 32), input_channels=3)
    params = resnet.build(cfg, seed=1, dtype=np.float64)
    for b in range(cfg.depth_param_n):
        params[f"stage1.block{b}.conv2"].weight[:] = 0.0
    x = rng.uniform(0, 1, (3, 3, 15, 15))
    acts = {}
    resnet.forward(params, x, "eval", activations=acts)
    # hand-built shortcut-only stage: the stem output goes straight through
    stem = resnet.build(cfg, seed=1, dtype=np.float64)
    ref = {}
    resnet.forward(stem, x, "eval", activations=ref)
    np.testing.assert_array_equal(acts["stage1"], acts["stem"])
    np.testing.assert_array_equal(acts["stem"], ref["stem"])


def test_tiny_network_gradient_check(rng):
    cfg = resnet.NetworkConfig(depth_param_n=1, stage_widths=(4, 8, 16), input_channels=4)
    params = resnet.build(cfg, seed=0, dtype=np.float64)
    report = resnet.check_gradients(params, rng.uniform(0, 1, (3, 4, 15, 15)), np.array([0, 1, 1]))
    assert report.passed, str(report)
    assert report.n_checked >= 200
    names = {n.rsplit(".", 1)[0] for n in report.per_array}
    assert "stage2.block0.shortcut.conv" in names and "input" in names


def test_loss_scale_doubles_gradients(tiny_params, rng):
    params = tiny_params.astype(np.float64)
    x = rng.uniform(0, 0.5, (4, 7, 15, 15))
    y = np.array([0, 1, 0, 1])
    _, cache = resnet.forward(params, x, "train", rng=np.random.default_rng(0), return_cache=True)
    g1 = resnet.backward(params, cache, y)
    g2 = resnet.backward(params, cache, y, loss_scale=2.0)
    for k in g1:
        np.testing.assert_array_equal(g2[k], 2.0 * g1[k])


def test_saturated_correct_predictions_give_tiny_gradients(rng):
    cfg = resnet.NetworkConfig(depth_param_n=1, stage_widths=(4, 8, 16), input_channels=2)
    params = resnet.build(cfg, seed=0, dtype=np.float64)
    params["fc"].bias[:] = [60.0, -60.0]  # everything confidently clear
    x = rng.uniform(0, 1, (4, 2, 15, 15))
    _, cache = resnet.forward(params, x, "train", dropout_keep=1.0, return_cache=True)
    grads = resnet.backward(params, cache, np.zeros(4, int))
    assert max(np.abs(g).max() for g in grads.values()) < 1e-8


def test_stale_cache_rejected(tiny_params, rng):
    params = tiny_params.copy()
    x = rng.uniform(0, 0.5, (2, 7, 15, 15)).astype(np.float32)
    _, cache = resnet.forward(params, x, "train", rng=np.random.default_rng(0), return_cache=True)
    params.touch()
    with pytest.raises(ContractViolation):
        resnet.backward(params, cache, np.array([0, 1]))
    with pytest.raises(ContractViolation):
        resnet.backward(params, None, np.array([0, 1]))


def test_parameter_keys_checked(tiny_params):
    layers = dict(tiny_params.layers)
    layers.pop("fc")
    with pytest.raises(ContractViolation):
        resnet.ParameterSet(tiny_params.config, layers)


def test_checkpoint_roundtrip_bit_exact(tiny_params):
    data = resnet.dumps_checkpoint(tiny_params)
    back = resnet.loads_checkpoint(data)
    assert back.config == tiny_params.config
    for (na, a), (nb, b) in zip(tiny_params.named_arrays(True).items(), back.named_arrays(True).items()):
        assert na == nb and a.tobytes() == b.tobytes()
    assert resnet.dumps_checkpoint(back) == data


def test_checkpoint_faults(tiny_params):
    data = resnet.dumps_checkpoint(tiny_params)
    with pytest.raises(MagicError):
        resnet.loads_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(TruncationError):
        resnet.loads_checkpoint(data[:-1])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        resnet.loads_checkpoint(bytes(flipped))
