"""Local-region enumeration, 2x2 grid train/validation split, and subsampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractViolation, DataError, FormatError
from .scene import CLOUD_SHADOW, NODATA

EXTENT = 15
HALF = EXTENT // 2
SPLITS = ("train", "val", "test")
LABELS = {0: "clear", CLOUD_SHADOW: "cloud_shadow"}
LABEL_CODES = {v: k for k, v in LABELS.items()}
MANIFEST_HEADER = "# patchmask sample manifest v1"


def valid_center_mask(nodata, extent=EXTENT):
    """Boolean plane, True where the ``extent``-square window around the pixel
    lies inside the raster and contains no nodata pixel."""
    nodata = np.asarray(nodata, dtype=bool)
    h, w = nodata.shape
    out = np.zeros((h, w), dtype=bool)
    if h < extent or w < extent:
        return out
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = nodata.cumsum(0).cumsum(1)
    e = extent
    counts = integral[e:, e:] - integral[:-e, e:] - integral[e:, :-e] + integral[:-e, :-e]
    half = extent // 2
    out[half:h - half, half:w - half] = counts == 0
    return out


def enumerate_valid(scene):
    """Yield ``(row, col)`` of every valid window center, in row-major order."""
    for r, c in np.argwhere(valid_center_mask(scene.nodata)):
        yield int(r), int(c)


@dataclass(frozen=True)
class GridSplit:
    """2x2 partition of a scene; the first half of an odd axis gets the extra line."""

    height: int
    width: int
    val_quadrant: int

    @property
    def row_cut(self):
        return (self.height + 1) // 2

    @property
    def col_cut(self):
        return (self.width + 1) // 2

    def bounds(self, quadrant):
        """``(row0, row1, col0, col1)`` of quadrant 0..3 (TL, TR, BL, BR)."""
        top, left = quadrant < 2, quadrant % 2 == 0
        rows = (0, self.row_cut) if top else (self.row_cut, self.height)
        cols = (0, self.col_cut) if left else (self.col_cut, self.width)
        return rows + cols

    def quadrant_of(self, row, col):
        return 2 * int(row >= self.row_cut) + int(col >= self.col_cut)

    def split_of(self, quadrant):
        return "val" if quadrant == self.val_quadrant else "train"


def grid_split(height, width, seed=None):
    """Random 2x2 assignment: one sub-image for validation, three for training.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    if height < 30 or width < 30:
        raise ConfigurationError(f"scene {height}x{width} too small for a 2x2 grid (need 30x30)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return GridSplit(height, width, int(rng.integers(4)))


@dataclass(frozen=True)
class PatchRef:
    scene_id: str
    row: int
    col: int
    split: str
    label: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ContractViolation(f"unknown split {self.split!r}")
        if self.label not in LABELS:
            raise ContractViolation(f"patch label must be clear or cloud_shadow, got {self.label}")

    def revalidate(self, scene):
        """True if the window is in bounds and nodata-free in ``scene``."""
        r, c = self.row, self.col
        if r < HALF or c < HALF or r + HALF >= scene.height or c + HALF >= scene.width:
            return False
        return not scene.nodata[r - HALF:r + HALF + 1, c - HALF:c + HALF + 1].any()


@dataclass
class SampleSet:
    refs: list = field(default_factory=list)
    seed: int | None = None
    quota: int | None = None
    grids: dict = field(default_factory=dict)
    shortfalls: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.refs)

    def split(self, name):
        return [r for r in self.refs if r.split == name]

    def scene_ids(self):
        return sorted({r.scene_id for r in self.refs})

    def counts(self):
        out = {s: 0 for s in SPLITS}
        for r in self.refs:
            out[r.split] += 1
        return out

    def check_unique(self):
        keys = [(r.scene_id, r.row, r.col) for r in self.refs]
        if len(set(keys)) != len(keys):
            raise ContractViolation("sample set contains duplicate (scene, center) pairs")

    @classmethod
    def merge(cls, sets, seed=None):
        out = cls(seed=seed)
        for s in sets:
            out.refs.extend(s.refs)
            out.grids.update(s.grids)
            out.shortfalls.update(s.shortfalls)
            if out.quota is None:
                out.quota = s.quota
        out.check_unique()
        return out

    def to_text(self):
        lines = [MANIFEST_HEADER, f"# seed={self.seed}", f"# quota={self.quota}"]
        for sid, g in sorted(self.grids.items()):
            lines.append(f"# grid {sid} height={g.height} width={g.width} val_quadrant={g.val_quadrant}")
        for (sid, q), n in sorted(self.shortfalls.items()):
            lines.append(f"# shortfall {sid} {q} {n}")
        lines.append("# scene_id row col split label")
        lines += [f"{r.scene_id} {r.row} {r.col} {r.split} {LABELS[r.label]}" for r in self.refs]
        return "\n".join(lines) + "\n"

    def checksum(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise FormatError("not a patchmask sample manifest", 0)
        out = cls()
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0].startswith("seed="):
                    v = parts[0].split("=", 1)[1]
                    out.seed = None if v == "None" else int(v)
                elif parts and parts[0].startswith("quota="):
                    v = parts[0].split("=", 1)[1]
                    out.quota = None if v == "None" else int(v)
                elif parts and parts[0] == "grid":
                    kv = dict(p.split("=") for p in parts[2:])
                    out.grids[parts[1]] = GridSplit(int(kv["height"]), int(kv["width"]),
                                                    int(kv["val_quadrant"]))
                elif parts and parts[0] == "shortfall":
                    out.shortfalls[(parts[1], int(parts[2]))] = int(parts[3])
                continue
            fields = line.split()
            if len(fields) != 5 or fields[4] not in LABEL_CODES:
                raise FormatError(f"malformed manifest line {lineno}: {line!r}")
            out.refs.append(PatchRef(fields[0], int(fields[1]), int(fields[2]), fields[3],
                                     LABEL_CODES[fields[4]]))
        return out

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _labelled_centers(scene, truth):
    if truth.shape != scene.shape:
        raise ContractViolation(f"truth {truth.shape} not aligned with scene {scene.shape}")
    return valid_center_mask(scene.nodata) & (truth.labels != NODATA)


def subsample(scene, truth, quota=10_000, seed=0, scene_id="scene", strict=False):
    """Draw ``quota / 4`` centers per grid sub-image without replacement.

    Centers are assigned to the sub-image containing them. With ``strict``,
    centers whose window crosses a grid line are excluded so that training
    and validation windows never overlap.
    """
    rng = np.random.default_rng(seed)
    grid = grid_split(scene.height, scene.width, rng)
    valid = _labelled_centers(scene, truth)
    if strict:
        for cut, axis in ((grid.row_cut, 0), (grid.col_cut, 1)):
            band = slice(max(cut - HALF, 0), cut + HALF)
            if axis == 0:
                valid[band, :] = False
            else:
                valid[:, band] = False
    if not valid.any():
        raise DataError(f"scene {scene_id!r} has no valid labelled 15x15 windows")
    shares = [quota // 4 + (1 if q < quota % 4 else 0) for q in range(4)]
    out = SampleSet(seed=seed, quota=quota, grids={scene_id: grid})
    for q in range(4):
        r0, r1, c0, c1 = grid.bounds(q)
        cand = np.argwhere(valid[r0:r1, c0:c1]) + (r0, c0)
        k = min(shares[q], len(cand))
        if k < shares[q]:
            out.shortfalls[(scene_id, q)] = shares[q] - k
        picks = np.sort(rng.choice(len(cand), size=k, replace=False)) if k else []
        split = grid.split_of(q)
        for r, c in cand[picks]:
            out.refs.append(PatchRef(scene_id, int(r), int(c), split, int(truth.labels[r, c])))
    return out


def subsample_scene(scene, truth, quota=10_000, seed=0, scene_id="scene", split="train"):
    """Uniform draw over the whole scene, every center assigned to ``split``."""
    rng = np.random.default_rng(seed)
    valid = _labelled_centers(scene, truth)
    cand = np.argwhere(valid)
    if not len(cand):
        raise DataError(f"scene {scene_id!r} has no valid labelled 15x15 windows")
    k = min(quota, len(cand))
    out = SampleSet(seed=seed, quota=quota)
    if k < quota:
        out.shortfalls[(scene_id, -1)] = quota - k
    for r, c in cand[np.sort(rng.choice(len(cand), size=k, replace=False))]:
        out.refs.append(PatchRef(scene_id, int(r), int(c), split, int(truth.labels[r, c])))
    return out


def extract_batch(scene, rows, cols, bands=None):
    """Windows ``(n, channels, 15, 15)`` centred on ``(rows[i], cols[i])``."""
    if bands is not None:
        scene = scene.select(bands)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    windows = sliding_window_view(scene.data, (EXTENT, EXTENT), axis=(1, 2))
    return np.ascontiguousarray(windows[:, rows - HALF, cols - HALF].transpose(1, 0, 2, 3))


def extract(scene, ref, bands=None):
    """Channel-major copy ``(channels, 15, 15)`` of the window around ``ref``."""
    if not ref.revalidate(scene):
        raise ContractViolation(f"window at ({ref.row}, {ref.col}) is out of bounds or contains nodata")
    return extract_batch(scene, [ref.row], [ref.col], bands)[0]


def extract_refs(scenes, refs, bands=None):
    """Stack patches and labels for refs drawn from ``scenes`` (id -> BandStack)."""
    if not refs:
        raise ContractViolation("no patches to extract")
    by_scene = {}
    for i, r in enumerate(refs):
        by_scene.setdefault(r.scene_id, []).append(i)
    first = scenes[refs[0].scene_id]
    channels = len(bands) if bands is not None else len(first.bands)
    x = np.empty((len(refs), channels, EXTENT, EXTENT), dtype=np.float32)
    for sid, idx in by_scene.items():
        scene = scenes[sid]
        rows = [refs[i].row for i in idx]
        cols = [refs[i].col for i in idx]
        mask = valid_center_mask(scene.nodata)
        if not mask[rows, cols].all():
            raise ContractViolation(f"scene {sid!r}: sample refs point at invalid windows")
        x[idx] = extract_batch(scene, rows, cols, bands)
    y = np.array([r.label for r in refs], dtype=np.int64)
    return x, y
