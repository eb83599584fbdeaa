"""Band stacks, mask rasters, their containers, and valid-region preparation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import binio
from .errors import ConfigurationError, ContractViolation, DataError, FormatError

BAND_NAMES = ("ultra_blue", "blue", "green", "red", "nir", "swir1", "swir2")
REFLECTANCE_SCALE = 10_000.0
REFLECTANCE_RANGE = (-0.2, 1.6)

# binary mask labels
CLEAR, CLOUD_SHADOW, NODATA = 0, 1, 255
LABEL_NAMES = {CLEAR: "clear", CLOUD_SHADOW: "cloud_shadow", NODATA: "nodata"}

# raw (four-class) label codes accepted by binarize_labels
RAW_CLEAR, RAW_CLOUD, RAW_SHADOW, RAW_NODATA = 0, 1, 2, 255
RAW_CODES = {"clear": RAW_CLEAR, "cloud": RAW_CLOUD, "shadow": RAW_SHADOW, "nodata": RAW_NODATA}

STACK_MAGIC, MASK_MAGIC = b"PMBS", b"PMMR"
FORMAT_VERSION = 1
ID_BYTES = 16


@dataclass(frozen=True, eq=False)
class BandStack:
    """Aligned surface-reflectance planes ``data[band, row, col]``.

    ``nodata`` is True where a pixel is outside the usable footprint.
    Reflectance is unit-scaled (stored integers divided by 10,000).
    """

    data: np.ndarray
    bands: tuple
    nodata: np.ndarray
    pixel_size_m: float = 30.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        nodata = np.asarray(self.nodata, dtype=bool)
        bands = tuple(self.bands)
        if data.ndim != 3 or data.shape[0] != len(bands) or len(bands) == 0:
            raise ContractViolation(f"band data {data.shape} does not match {len(bands)} band ids")
        if nodata.shape != data.shape[1:]:
            raise ContractViolation(f"nodata plane {nodata.shape} != band plane {data.shape[1:]}")
        if len(set(bands)) != len(bands):
            raise ContractViolation(f"duplicate band identifiers in {bands}")
        unknown = [b for b in bands if b not in BAND_NAMES]
        if unknown:
            raise ContractViolation(f"unknown band identifiers {unknown}; expected some of {BAND_NAMES}")
        valid = data[:, ~nodata]
        lo, hi = REFLECTANCE_RANGE
        if valid.size and not (np.all(np.isfinite(valid)) and valid.min() >= lo and valid.max() <= hi):
            raise DataError(f"valid reflectance outside [{lo}, {hi}] (range {valid.min()}..{valid.max()})")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "nodata", nodata)
        object.__setattr__(self, "bands", bands)

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape[1:]

    def band(self, name):
        return self.data[self.bands.index(name)]

    def select(self, bands):
        """Sub-stack with the given bands, in the given order."""
        bands = tuple(bands)
        missing = [b for b in bands if b not in self.bands]
        if missing:
            raise ConfigurationError(f"bands {missing} not present in scene bands {self.bands}")
        idx = [self.bands.index(b) for b in bands]
        return BandStack(self.data[idx], bands, self.nodata, self.pixel_size_m)

    def drop(self, bands):
        bands = set(bands)
        missing = bands - set(self.bands)
        if missing:
            raise ConfigurationError(f"cannot drop bands {sorted(missing)} absent from {self.bands}")
        return self.select([b for b in self.bands if b not in bands])


@dataclass(frozen=True, eq=False)
class MaskRaster:
    """Per-pixel labels in {CLEAR, CLOUD_SHADOW, NODATA} plus optional confidence.

    The confidence plane, when present, is finite exactly on non-nodata
    pixels (NaN elsewhere) and lies in [0, 1].
    """

    labels: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ContractViolation(f"label plane must be 2-d, got {labels.shape}")
        if not np.isin(labels, (CLEAR, CLOUD_SHADOW, NODATA)).all():
            raise DataError("label plane contains codes outside {clear, cloud_shadow, nodata}")
        labels = labels.astype(np.uint8)
        object.__setattr__(self, "labels", labels)
        if self.confidence is not None:
            conf = np.asarray(self.confidence, dtype=np.float32)
            if conf.shape != labels.shape:
                raise ContractViolation(f"confidence {conf.shape} != labels {labels.shape}")
            defined = np.isfinite(conf)
            if not np.array_equal(defined, labels != NODATA):
                raise ContractViolation("confidence must be defined exactly on non-nodata pixels")
            if defined.any() and (conf[defined].min() < 0 or conf[defined].max() > 1):
                raise DataError("confidence values outside [0, 1]")
            object.__setattr__(self, "confidence", conf)

    @property
    def shape(self):
        return self.labels.shape

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def valid(self):
        return self.labels != NODATA

    def counts(self):
        return {name: int(np.count_nonzero(self.labels == code)) for code, name in LABEL_NAMES.items()}


# --------------------------------------------------------------------------
# containers


def _pack_ids(w, ids):
    for name in ids:
        raw = name.encode("ascii")
        if len(raw) > ID_BYTES:
            raise ContractViolation(f"identifier {name!r} longer than {ID_BYTES} bytes")
        w.raw(raw.ljust(ID_BYTES, b"\0"))


def _unpack_ids(r, count):
    return tuple(bytes(r.take(ID_BYTES)).rstrip(b"\0").decode("ascii") for _ in range(count))


def dumps_bandstack(stack):
    w = binio.Writer()
    w.raw(STACK_MAGIC)
    w.pack("HIIH", FORMAT_VERSION, stack.width, stack.height, len(stack.bands))
    _pack_ids(w, stack.bands)
    w.array(stack.data, np.float32)
    w.array(~stack.nodata, np.uint8)
    return w.finish()


def loads_bandstack(data):
    r = binio.Reader(data, STACK_MAGIC, {FORMAT_VERSION})
    width, height, count = r.unpack("IIH")
    r.expect_total(16 + ID_BYTES * count + (4 * count + 1) * width * height + binio.CHECKSUM_SIZE)
    bands = _unpack_ids(r, count)
    planes = r.array(np.float32, (count, height, width))
    valid = r.array(np.uint8, (height, width))
    r.finish()
    return BandStack(planes, bands, valid == 0)


def dumps_mask(mask):
    w = binio.Writer()
    w.raw(MASK_MAGIC)
    ids = ("labels",) if mask.confidence is None else ("labels", "confidence")
    w.pack("HIIH", FORMAT_VERSION, mask.width, mask.height, len(ids))
    _pack_ids(w, ids)
    w.array(mask.labels, np.uint8)
    if mask.confidence is not None:
        w.array(mask.confidence, np.float32)
    return w.finish()


def loads_mask(data):
    r = binio.Reader(data, MASK_MAGIC, {FORMAT_VERSION})
    width, height, count = r.unpack("IIH")
    if count not in (1, 2):
        raise FormatError(f"mask must hold 1 or 2 planes, header says {count}", 14)
    r.expect_total(16 + ID_BYTES * count + (1 + 4 * (count - 1)) * width * height + binio.CHECKSUM_SIZE)
    ids = _unpack_ids(r, count)
    if ids not in (("labels",), ("labels", "confidence")):
        raise FormatError(f"unexpected mask planes {ids}", 16)
    labels = r.array(np.uint8, (height, width))
    conf = r.array(np.float32, (height, width)) if len(ids) == 2 else None
    r.finish()
    return MaskRaster(labels, conf)


def write_bandstack(stack, path):
    binio.write_atomic(path, dumps_bandstack(stack))


def read_bandstack(path):
    return loads_bandstack(binio.read_bytes(path))


def write_mask(mask, path):
    binio.write_atomic(path, dumps_mask(mask))


def read_mask(path):
    return loads_mask(binio.read_bytes(path))


# --------------------------------------------------------------------------
# valid-region preparation


def intersect_valid(planes):
    """Pixelwise AND of boolean validity planes (True = valid)."""
    planes = [np.asarray(p, dtype=bool) for p in planes]
    if not planes:
        raise ContractViolation("intersect_valid needs at least one plane")
    shape = planes[0].shape
    if any(p.shape != shape for p in planes):
        raise ContractViolation(f"validity planes differ in shape: {[p.shape for p in planes]}")
    return np.logical_and.reduce(planes)


def clip_stack(stack, valid):
    """Mark everything outside ``valid`` as nodata."""
    return BandStack(stack.data, stack.bands, stack.nodata | ~valid, stack.pixel_size_m)


def clip_mask(mask, valid):
    labels = np.where(valid, mask.labels, NODATA).astype(np.uint8)
    conf = None
    if mask.confidence is not None:
        conf = np.where(valid, mask.confidence, np.nan).astype(np.float32)
    return MaskRaster(labels, conf)


def prepare(stack, *masks):
    """Clip a scene and its masks to the intersection of all their valid regions."""
    valid = intersect_valid([~stack.nodata] + [m.valid for m in masks])
    return (clip_stack(stack, valid),) + tuple(clip_mask(m, valid) for m in masks)


def binarize_labels(raw, codes=None):
    """Collapse a four-class label plane into clear / cloud_shadow / nodata.

    ``codes`` maps the class names clear, cloud, shadow, nodata to raw
    values (defaults to 0, 1, 2, 255). Any other value is a data error.
    """
    codes = dict(RAW_CODES, **(codes or {}))
    raw = np.asarray(raw)
    out = np.full(raw.shape, 254, dtype=np.uint8)
    out[raw == codes["clear"]] = CLEAR
    out[(raw == codes["cloud"]) | (raw == codes["shadow"])] = CLOUD_SHADOW
    out[raw == codes["nodata"]] = NODATA
    unknown = out == 254
    if unknown.any():
        bad = np.unique(raw[unknown])[:10]
        raise DataError(f"unknown label codes {bad.tolist()}")
    return MaskRaster(out)


# --------------------------------------------------------------------------
# raw-plane import


@dataclass
class RawHeader:
    """Sidecar description of flat raw planes exported from a GIS tool."""

    width: int
    height: int
    data_file: str
    kind: str = "bands"
    bands: list = field(default_factory=list)
    dtype: str = "int16"
    byte_order: str = "little"
    scale: float = 1.0 / REFLECTANCE_SCALE
    nodata_value: float | None = None
    valid_mask_file: str | None = None
    label_codes: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: header must be a mapping")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"{path}: unknown header keys {sorted(unknown)}")
        for key in ("width", "height", "data_file"):
            if key not in doc:
                raise ConfigurationError(f"{path}: header is missing {key!r}")
        hdr = cls(**doc)
        if isinstance(hdr.bands, str):
            hdr.bands = [b.strip() for b in hdr.bands.split(",") if b.strip()]
        base = os.path.dirname(os.path.abspath(path))
        hdr.data_file = os.path.join(base, hdr.data_file)
        if hdr.valid_mask_file:
            hdr.valid_mask_file = os.path.join(base, hdr.valid_mask_file)
        if hdr.kind not in ("bands", "labels"):
            raise ConfigurationError(f"{path}: kind must be 'bands' or 'labels'")
        return hdr

    def _read(self, path, count, dtype):
        dt = np.dtype(dtype).newbyteorder("<" if self.byte_order == "little" else ">")
        expected = count * self.width * self.height * dt.itemsize
        size = os.path.getsize(path)
        if size != expected:
            raise FormatError(f"{path}: expected {expected} bytes for {count} plane(s), found {size}")
        arr = np.fromfile(path, dtype=dt).astype(dt.newbyteorder("="))
        return arr.reshape(count, self.height, self.width)


def import_raw(header_path):
    """Build a BandStack (kind 'bands') or MaskRaster (kind 'labels') from raw planes."""
    hdr = RawHeader.load(header_path)
    valid = np.ones((hdr.height, hdr.width), dtype=bool)
    if hdr.valid_mask_file:
        valid = hdr._read(hdr.valid_mask_file, 1, "uint8")[0] != 0
    if hdr.kind == "labels":
        raw = hdr._read(hdr.data_file, 1, hdr.dtype)[0]
        mask = binarize_labels(raw, hdr.label_codes)
        return clip_mask(mask, valid)
    if not hdr.bands:
        raise ConfigurationError(f"{header_path}: 'bands' list is required for kind 'bands'")
    raw = hdr._read(hdr.data_file, len(hdr.bands), hdr.dtype).astype(np.float64)
    invalid = ~valid | ~np.isfinite(raw).all(axis=0)
    if hdr.nodata_value is not None:
        invalid |= (raw == hdr.nodata_value).any(axis=0)
    data = np.where(invalid, 0.0, raw * hdr.scale).astype(np.float32)
    return BandStack(data, tuple(hdr.bands), invalid)
