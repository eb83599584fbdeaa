"""Sliding-window scene inference, thresholding, and PNG rendering."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import resnet
from .errors import ConfigurationError
from .sampler import extract_batch, valid_center_mask
from .scene import CLEAR, CLOUD_SHADOW, NODATA, MaskRaster

PALETTE = {
    CLEAR: (128, 128, 128),
    CLOUD_SHADOW: (255, 255, 255),
    NODATA: (0, 0, 0),
}


@dataclass(frozen=True)
class InferenceConfig:
    checkpoint: str | None = None
    threshold: float = 0.5
    bands: tuple | None = None
    tile_size: int = 2048
    threads: int = 1

    def __post_init__(self):
        check_threshold(self.threshold)
        if self.tile_size < 1 or self.threads < 1:
            raise ConfigurationError("tile_size and threads must be positive")
        if self.bands is not None:
            object.__setattr__(self, "bands", tuple(self.bands))


def check_threshold(threshold):
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie strictly inside (0, 1), got {threshold}")


def apply_threshold(confidence, threshold=0.5):
    """Label plane from a confidence plane; NaN marks nodata.

    A confidence exactly equal to the threshold counts as cloud_shadow.
    """
    check_threshold(threshold)
    conf = np.asarray(confidence)
    labels = np.full(conf.shape, NODATA, dtype=np.uint8)
    defined = np.isfinite(conf)
    labels[defined] = np.where(conf[defined] >= threshold, CLOUD_SHADOW, CLEAR)
    return labels


def rethreshold(mask, threshold):
    """Relabel a stored mask from its confidence plane without re-running the network."""
    if mask.confidence is None:
        raise ConfigurationError("mask has no confidence plane to rethreshold")
    return MaskRaster(apply_threshold(mask.confidence, threshold), mask.confidence)


def _prepare_scene(scene, params, bands):
    if bands is not None:
        scene = scene.select(bands)
    if len(scene.bands) != params.config.input_channels:
        raise ConfigurationError(
            f"scene provides {len(scene.bands)} bands {scene.bands}; checkpoint expects "
            f"{params.config.input_channels} input channels")
    return scene


def infer_scene(scene, config=None, params=None):
    """Classify every valid 15x15 window centre of ``scene``.

    Pixels whose window leaves the raster or touches nodata (including the
    7-pixel frame) are labelled nodata. Results do not depend on
    ``tile_size`` or ``threads``.
    """
    config = config or InferenceConfig()
    if params is None:
        if config.checkpoint is None:
            raise ConfigurationError("no checkpoint given")
        params = resnet.load_checkpoint(config.checkpoint)
    scene = _prepare_scene(scene, params, config.bands)
    centers = np.argwhere(valid_center_mask(scene.nodata))
    confidence = np.full(scene.shape, np.nan, dtype=np.float32)

    def run(start):
        chunk = centers[start:start + config.tile_size]
        x = extract_batch(scene, chunk[:, 0], chunk[:, 1])
        probs = resnet.forward(params, x, "eval")
        confidence[chunk[:, 0], chunk[:, 1]] = probs[:, 1]

    starts = range(0, len(centers), config.tile_size)
    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return MaskRaster(apply_threshold(confidence, config.threshold), confidence)


# --------------------------------------------------------------------------
# rendering


def mask_to_rgb(mask):
    """Gray clear, white cloud_shadow, black nodata."""
    labels = mask.labels if isinstance(mask, MaskRaster) else np.asarray(mask)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for code, color in PALETTE.items():
        out[labels == code] = color
    return out


def rgb_composite(scene, low=2.0, high=98.0):
    """True-colour composite with a per-band percentile stretch over valid pixels."""
    missing = [b for b in ("red", "green", "blue") if b not in scene.bands]
    if missing:
        raise ConfigurationError(f"RGB composite needs bands {missing}, absent from {scene.bands}")
    valid = ~scene.nodata
    out = np.zeros(scene.shape + (3,), dtype=np.uint8)
    if not valid.any():
        return out
    for i, name in enumerate(("red", "green", "blue")):
        plane = scene.band(name).astype(np.float64)
        lo, hi = np.percentile(plane[valid], [low, high])
        scaled = np.clip((plane - lo) / max(hi - lo, 1e-12), 0, 1)
        out[..., i] = np.where(valid, np.round(scaled * 255), 0).astype(np.uint8)
    return out


def render_png(mask, path, scene=None, rgb_path=None):
    """Write the mask PNG, and the RGB composite too when ``scene`` is given."""
    from PIL import Image

    Image.fromarray(mask_to_rgb(mask)).save(path)
    written = [path]
    if scene is not None:
        if scene.shape != mask.shape:
            raise ConfigurationError(f"scene {scene.shape} and mask {mask.shape} differ in size")
        rgb_path = rgb_path or str(path).replace(".png", "") + "_rgb.png"
        Image.fromarray(rgb_composite(scene)).save(rgb_path)
        written.append(rgb_path)
    return written
