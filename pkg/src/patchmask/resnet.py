"""CIFAR-style 6n+2 residual network for central-pixel classification.

Layout: stem conv(3x3) -> three stages of ``n`` basic blocks (widths
``stage_widths``, stride 2 on entry to stages 2 and 3) -> global average
pool -> dropout -> fully connected -> softmax. Blocks are post-activation:
conv-bn-relu-conv-bn, add shortcut, relu. Stage transitions use a 1x1
projection (conv + bn) on the shortcut; everything else is identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import binio
from . import tensor_ops as ops
from .errors import ChecksumError, ConfigurationError, ContractViolation, PatchMaskError, TruncationError

STANDARD_DEPTHS = (3, 5, 7, 9)
CHECKPOINT_MAGIC = b"PMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    depth_param_n: int = 3
    stage_widths: tuple = (16, 32, 64)
    input_channels: int = 7
    input_extent: int = 15
    num_classes: int = 2
    dropout_keep: float = 0.5
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        n = self.depth_param_n
        if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
            raise ConfigurationError(f"depth parameter n must be a positive integer, got {n!r}")
        if len(self.stage_widths) != 3 or min(self.stage_widths) < 1:
            raise ConfigurationError(f"expected three positive stage widths, got {self.stage_widths}")
        if not 1 <= self.input_channels <= 8:
            raise ConfigurationError(f"input_channels must be in 1..8, got {self.input_channels}")
        if self.input_extent < 1 or self.input_extent % 2 == 0:
            raise ConfigurationError("input_extent must be odd so a central pixel exists")
        if self.num_classes != 2:
            raise ConfigurationError("only binary classification is supported")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigurationError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")

    @property
    def depth(self):
        return 6 * self.depth_param_n + 2

    def to_dict(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layer_plan(config):
    """Ordered ``(key, kind, in_ch, out_ch, kernel, stride)`` for every layer."""
    plan = [("stem.conv", "conv", config.input_channels, config.stage_widths[0], 3, 1),
            ("stem.bn", "bn", None, config.stage_widths[0], None, None)]
    cin = config.stage_widths[0]
    for s, width in enumerate(config.stage_widths, start=1):
        for b in range(config.depth_param_n):
            stride = 2 if (s > 1 and b == 0) else 1
            pre = f"stage{s}.block{b}"
            plan += [(f"{pre}.conv1", "conv", cin, width, 3, stride),
                     (f"{pre}.bn1", "bn", None, width, None, None),
                     (f"{pre}.conv2", "conv", width, width, 3, 1),
                     (f"{pre}.bn2", "bn", None, width, None, None)]
            if stride != 1 or cin != width:
                plan += [(f"{pre}.shortcut.conv", "conv", cin, width, 1, stride),
                         (f"{pre}.shortcut.bn", "bn", None, width, None, None)]
            cin = width
    plan.append(("fc", "fc", cin, config.num_classes, None, None))
    return plan


@dataclass
class ParameterSet:
    """All layer parameters of one network, keyed by layer path."""

    config: NetworkConfig
    layers: dict = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        expected = [p[0] for p in layer_plan(self.config)]
        if list(self.layers) != expected:
            missing = set(expected) - set(self.layers)
            extra = set(self.layers) - set(expected)
            raise ContractViolation(f"parameter keys do not match config (missing {sorted(missing)}, "
                                    f"unexpected {sorted(extra)})")

    @property
    def dtype(self):
        return self.layers["stem.conv"].weight.dtype

    def __getitem__(self, key):
        return self.layers[key]

    def named_arrays(self, include_statistics=False):
        """Flat ``{"layer.field": array}`` view (arrays are shared, not copied)."""
        out = {}
        for key, lp in self.layers.items():
            for name, arr in lp.arrays(include_statistics).items():
                out[f"{key}.{name}"] = arr
        return out

    def set_array(self, name, value):
        key, attr = name.rsplit(".", 1)
        setattr(self.layers[key], attr, value)

    def weighted_layer_count(self):
        """Convolutions plus the FC layer, shortcut projections excluded."""
        return sum(1 for key, lp in self.layers.items()
                   if lp.weight is not None and ".shortcut." not in key)

    def touch(self):
        """Mark parameters as modified; invalidates earlier forward caches."""
        self.version += 1

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.named_arrays(True).values())

    def copy(self):
        return ParameterSet(self.config, {k: lp.copy() for k, lp in self.layers.items()}, self.version)

    def astype(self, dtype):
        out = self.copy()
        for name, arr in out.named_arrays(True).items():
            out.set_array(name, arr.astype(dtype))
        return out

    def n_parameters(self):
        return sum(a.size for a in self.named_arrays().values())


def build(config, seed=0, dtype=np.float32):
    """Fresh parameters: He-normal weights, zero bias, unit/zero normalization."""
    rng = np.random.default_rng(seed)
    layers = {}
    for key, kind, cin, cout, k, _ in layer_plan(config):
        if kind == "conv":
            fan_in = cin * k * k
            w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
            layers[key] = ops.LayerParams(weight=w.astype(dtype))
        elif kind == "bn":
            layers[key] = ops.LayerParams(
                scale=np.ones(cout, dtype), shift=np.zeros(cout, dtype),
                running_mean=np.zeros(cout, dtype), running_var=np.ones(cout, dtype),
                momentum=config.bn_momentum)
        else:
            w = rng.standard_normal((cout, cin)) * np.sqrt(2.0 / cin)
            layers[key] = ops.LayerParams(weight=w.astype(dtype), bias=np.zeros(cout, dtype))
    return ParameterSet(config, layers)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    version: int
    mode: str
    entries: list
    probs: np.ndarray
    input_shape: tuple


def _check_input(params, x):
    cfg = params.config
    e = cfg.input_extent
    if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != (e, e):
        raise ContractViolation(
            f"expected input (batch, {cfg.input_channels}, {e}, {e}), got {tuple(x.shape)}")


def _chw(h):
    return (h.shape[3], h.shape[1], h.shape[2])


def forward(params, x, mode="eval", rng=None, dropout_keep=None, return_cache=False, trace=None,
            activations=None):
    """Class probabilities ``(batch, 2)``; column 1 is the cloud/shadow probability.

    ``trace``, when a list, receives ``(name, shape)`` for the stem, each
    stage output, and the head. ``activations``, when a dict, receives the
    stem and stage outputs as channel-first arrays.
    """
    _check_input(params, x)
    if mode not in ("train", "eval"):
        raise ContractViolation(f"unknown mode {mode!r}")
    keep = params.config.dropout_keep if dropout_keep is None else dropout_keep
    # patches arrive channel-first; layers run channel-last
    x = np.ascontiguousarray(np.asarray(x, dtype=params.dtype).transpose(0, 2, 3, 1))
    entries = []
    plan = {p[0]: p for p in layer_plan(params.config)}

    def unit(h, conv_key, bn_key, relu):
        out, cc = ops.conv2d_forward(h, params[conv_key], plan[conv_key][5])
        out, cb = ops.batchnorm_forward(out, params[bn_key], mode)
        cr = None
        if relu:
            out, cr = ops.relu_forward(out)
        entries.append((conv_key, bn_key, cc, cb, cr))
        return out

    h = unit(x, "stem.conv", "stem.bn", relu=True)
    if trace is not None:
        trace.append(("stem", _chw(h)))
    if activations is not None:
        activations["stem"] = h.transpose(0, 3, 1, 2).copy()
    for s in range(1, 4):
        for b in range(params.config.depth_param_n):
            pre = f"stage{s}.block{b}"
            r = unit(h, f"{pre}.conv1", f"{pre}.bn1", relu=True)
            r = unit(r, f"{pre}.conv2", f"{pre}.bn2", relu=False)
            if f"{pre}.shortcut.conv" in plan:
                sc = unit(h, f"{pre}.shortcut.conv", f"{pre}.shortcut.bn", relu=False)
            else:
                sc = h
            h, mask = ops.relu_forward(r + sc)
            entries.append(("add", pre, mask))
        if trace is not None:
            trace.append((f"stage{s}", _chw(h)))
        if activations is not None:
            activations[f"stage{s}"] = h.transpose(0, 3, 1, 2).copy()
    pooled, cp = ops.avgpool_global_forward(h)
    dropped, cd = ops.dropout_forward(pooled, keep, mode, rng)
    logits, cf = ops.fully_connected_forward(dropped, params["fc"])
    probs = ops.softmax(logits)
    if trace is not None:
        trace.append(("pool", pooled.shape[1:]))
        trace.append(("fc", logits.shape[1:]))
        trace.append(("softmax", probs.shape[1:]))
    if not return_cache:
        return probs
    entries.append(("head", cp, cd, cf))
    return probs, ForwardCache(params.version, mode, entries, probs, x.shape)


def backward(params, cache, labels, loss_scale=1.0, return_input_grad=False):
    """Gradients of ``loss_scale * cross_entropy`` for every learnable array.

    Returns ``{"layer.field": grad}`` (and the input gradient if requested).
    """
    if cache is None or not isinstance(cache, ForwardCache):
        raise ContractViolation("backward needs the cache from forward(..., return_cache=True)")
    if cache.version != params.version:
        raise ContractViolation("stale forward cache: parameters changed since the forward pass")
    _, dlogits = ops.cross_entropy_loss(cache.probs, labels)
    if loss_scale != 1.0:
        dlogits = dlogits * dlogits.dtype.type(loss_scale)
    grads = {}
    entries = list(cache.entries)
    _, cp, cd, cf = entries.pop()
    d, g = ops.fully_connected_backward(dlogits, cf)
    grads["fc.weight"], grads["fc.bias"] = g["weight"], g["bias"]
    d = ops.dropout_backward(d, cd)
    d = ops.avgpool_global_backward(d, cp)

    def unit_back(dh, entry):
        conv_key, bn_key, cc, cb, cr = entry
        if cr is not None:
            dh = ops.relu_backward(dh, cr)
        dh, gb = ops.batchnorm_backward(dh, cb)
        for name, arr in gb.items():
            grads[f"{bn_key}.{name}"] = arr
        dh, gc = ops.conv2d_backward(dh, cc)
        grads[f"{conv_key}.weight"] = gc["weight"]
        return dh

    # entries per block: conv1-unit, conv2-unit, [shortcut-unit], add
    while entries:
        entry = entries.pop()
        if entry[0] == "add":
            _, pre, mask = entry
            d = ops.relu_backward(d, mask)
            if entries[-1][0] == f"{pre}.shortcut.conv":
                d_sc = unit_back(d, entries.pop())
            else:
                d_sc = d
            d_r = unit_back(d, entries.pop())
            d_r = unit_back(d_r, entries.pop())
            d = d_r + d_sc
        else:
            d = unit_back(d, entry)
    ordered = {name: grads[name] for name in params.named_arrays() if name in grads}
    if len(ordered) != len(grads):
        raise ContractViolation("gradient keys do not match parameter keys")
    if return_input_grad:
        return ordered, np.ascontiguousarray(d.transpose(0, 3, 1, 2))
    return ordered


def loss_and_gradients(params, x, labels, rng=None, dropout_keep=None, mode="train"):
    """One train-mode forward/backward; returns ``(loss, probs, grads)``."""
    probs, cache = forward(params, x, mode, rng=rng, dropout_keep=dropout_keep, return_cache=True)
    loss, _ = ops.cross_entropy_loss(probs, labels)
    return loss, probs, backward(params, cache, labels)


def check_gradients(params, x, labels, tolerance=1e-4, n_checks=200, seed=0, dropout_keep=None):
    """Finite-difference check of every learnable array and the input, in float64.

    Runs in train mode with a fixed dropout mask (the RNG is reseeded for
    every evaluation). Returns a ``GradCheckReport``.
    """
    params = params.astype(np.float64)
    x = np.array(x, dtype=np.float64)

    def rng():
        return np.random.default_rng(seed + 1)

    def loss_fn():
        probs = forward(params, x, "train", rng=rng(), dropout_keep=dropout_keep)
        return ops.cross_entropy_loss(probs, labels)[0]

    _, cache = forward(params, x, "train", rng=rng(), dropout_keep=dropout_keep, return_cache=True)
    grads, dx = backward(params, cache, labels, return_input_grad=True)
    arrays = dict(params.named_arrays())
    arrays["input"] = x
    grads["input"] = dx
    return ops.gradient_check(loss_fn, arrays, grads, tolerance=tolerance, n_checks=n_checks, seed=seed)


def predict_proba(params, x, batch_size=1024):
    """Eval-mode cloud/shadow probabilities for a stack of patches, in batches."""
    out = np.empty(len(x), dtype=np.float64)
    for start in range(0, len(x), batch_size):
        out[start:start + batch_size] = forward(params, x[start:start + batch_size], "eval")[:, 1]
    return out


def shape_trace(config):
    """Feature-map shapes of a single eval-mode pass over a zero patch."""
    params = build(config, seed=0, dtype=np.float64)
    e = config.input_extent
    trace = []
    forward(params, np.zeros((1, config.input_channels, e, e)), "eval", trace=trace)
    return trace


# --------------------------------------------------------------------------
# checkpoint container


def dumps_checkpoint(params):
    w = binio.Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.pack("H", CHECKPOINT_VERSION)
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    w.pack("I", len(cfg))
    w.raw(cfg)
    arrays = params.named_arrays(include_statistics=True)
    w.pack("I", len(arrays))
    for name, arr in arrays.items():
        key = name.encode("ascii")
        w.pack("H", len(key))
        w.raw(key)
        w.pack("B", arr.ndim)
        w.pack(f"{arr.ndim}I", *arr.shape)
        w.array(arr, np.float32)
    return w.finish()


def loads_checkpoint(data, dtype=np.float32):
    r = binio.Reader(data, CHECKPOINT_MAGIC, {CHECKPOINT_VERSION})
    try:
        return _parse_checkpoint(r, dtype)
    except TruncationError:
        raise
    except (ValueError, KeyError, TypeError, PatchMaskError) as exc:
        # a corrupted byte usually surfaces as a parse error before the checksum is reached
        if not r.checksum_ok():
            raise ChecksumError(f"checksum mismatch ({exc})", r.pos) from exc
        raise


def _parse_checkpoint(r, dtype):
    (n,) = r.unpack("I")
    config = NetworkConfig.from_dict(json.loads(bytes(r.take(n)).decode()))
    (count,) = r.unpack("I")
    arrays = {}
    for _ in range(count):
        (klen,) = r.unpack("H")
        name = bytes(r.take(klen)).decode("ascii")
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I")
        arrays[name] = r.array(np.float32, shape).astype(dtype)
    r.finish()
    layers = {}
    for key, *_ in layer_plan(config):
        fields = {name.rsplit(".", 1)[1]: a for name, a in arrays.items() if name.rsplit(".", 1)[0] == key}
        if not fields:
            raise ContractViolation(f"checkpoint is missing layer {key}")
        layers[key] = ops.LayerParams(momentum=config.bn_momentum, **fields)
    return ParameterSet(config, layers)


def save_checkpoint(params, path):
    binio.write_atomic(path, dumps_checkpoint(params))


def load_checkpoint(path, dtype=np.float32):
    return loads_checkpoint(binio.read_bytes(path), dtype)
