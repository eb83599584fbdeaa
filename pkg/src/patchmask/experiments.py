"""Leave-one-out, all-land-type, and band-ablation experiment drivers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import inference, metrics, resnet, sampler, scene as scene_io, trainer
from .errors import ConfigurationError, PatchMaskError, TrainingAborted

log = logging.getLogger(__name__)

MODES = ("land_type_specific", "all_land_type", "ablation")
KEEP_FOUR = ("red", "green", "blue", "nir")
BAND_LABELS = {"ultra_blue": "ultra-b", "blue": "B", "green": "G", "red": "R", "nir": "NIR",
               "swir1": "SWIR1", "swir2": "SWIR2"}


@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    land_type: str
    scene_path: str
    truth_path: str


def read_scene_manifest(path):
    """CSV with columns scene_id, land_type, scene, truth (paths relative to the file)."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out.append(SceneEntry(row["scene_id"].strip(), row["land_type"].strip(),
                                      os.path.join(base, row["scene"].strip()),
                                      os.path.join(base, row["truth"].strip())))
            except KeyError as exc:
                raise ConfigurationError(f"{path}: missing column {exc}") from None
    if not out:
        raise ConfigurationError(f"{path}: no scenes listed")
    ids = [e.scene_id for e in out]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"{path}: duplicate scene ids")
    return out


def write_scene_manifest(entries, path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "land_type", "scene", "truth"])
        for e in entries:
            w.writerow([e.scene_id, e.land_type, os.path.relpath(e.scene_path, base),
                        os.path.relpath(e.truth_path, base)])


@dataclass
class ExperimentSpec:
    mode: str
    scenes: list
    bands: tuple | None = None
    drop: tuple | None = None
    train_config: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    network_config: resnet.NetworkConfig = field(default_factory=resnet.NetworkConfig)
    repetitions: int = 5
    seed: int = 0
    quota: int = 10_000
    strict_grid: bool = False
    threshold: float = 0.5
    tile_size: int = 2048
    threads: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown experiment mode {self.mode!r}; choose from {MODES}")
        if self.repetitions < 1:
            raise ConfigurationError("repetition count must be at least 1")
        if self.quota < 1:
            raise ConfigurationError("quota must be positive")
        inference.check_threshold(self.threshold)

    def to_dict(self):
        return {
            "mode": self.mode, "bands": self.bands, "drop": self.drop, "repetitions": self.repetitions,
            "seed": self.seed, "quota": self.quota, "strict_grid": self.strict_grid,
            "threshold": self.threshold, "tile_size": self.tile_size, "threads": self.threads,
            "train_config": self.train_config.to_dict(), "network_config": self.network_config.to_dict(),
            "scenes": [e.__dict__ for e in self.scenes],
        }


def derive_seed(master, *keys):
    """Deterministic child seed from a master seed and string/int keys."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        words.append(k & 0xFFFFFFFF if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode()))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class SceneCache:
    """Loads scenes and truths once, clipped to their common valid region."""

    def __init__(self, entries):
        self.entries = {e.scene_id: e for e in entries}
        self._cache = {}

    def check_files(self):
        missing = [p for e in self.entries.values() for p in (e.scene_path, e.truth_path)
                   if not os.path.exists(p)]
        if missing:
            raise ConfigurationError(f"missing scene files: {missing}")

    def get(self, scene_id):
        if scene_id not in self._cache:
            e = self.entries[scene_id]
            stack = scene_io.read_bandstack(e.scene_path)
            truth = scene_io.read_mask(e.truth_path)
            self._cache[scene_id] = scene_io.prepare(stack, truth)
        return self._cache[scene_id]

    def bands(self):
        first = next(iter(self.entries))
        return self.get(first)[0].bands


def _group_by_land_type(entries):
    groups = {}
    for e in entries:
        groups.setdefault(e.land_type, []).append(e)
    short = [lt for lt, g in groups.items() if len(g) < 2]
    if short:
        raise ConfigurationError(f"land types {short} have fewer than 2 scenes")
    return groups


def resolve_bands(scene_bands, bands=None, drop=None):
    """Band list after applying a keep list or a drop list."""
    if bands:
        missing = [b for b in bands if b not in scene_bands]
        if missing:
            raise ConfigurationError(f"bands {missing} not present in scenes {scene_bands}")
        return tuple(bands)
    if drop:
        missing = [b for b in drop if b not in scene_bands]
        if missing:
            raise ConfigurationError(f"cannot drop bands {missing}: not present in scenes {scene_bands}")
        kept = tuple(b for b in scene_bands if b not in drop)
        if not kept:
            raise ConfigurationError("drop list removes every band")
        return kept
    return tuple(scene_bands)


@dataclass
class RunResult:
    """Outcome of one train-then-test unit (a fold or a repetition)."""

    name: str
    test_reports: dict = field(default_factory=dict)
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    aborted: str | None = None
    history: list = field(default_factory=list)

    @property
    def report(self):
        if not self.test_reports:
            return None
        return metrics.aggregate(self.test_reports.values())


@dataclass
class ExperimentResult:
    mode: str
    runs: list
    groups: dict
    overall: metrics.MetricsReport | None
    rows: list = field(default_factory=list)

    @property
    def aborted(self):
        return [r.name for r in self.runs if r.aborted]

    @property
    def exit_status(self):
        return 1 if self.aborted else 0

    def table(self):
        rows = self.rows or [(name, rep) for name, rep in self.groups.items() if rep is not None]
        if not self.rows and self.overall is not None:
            rows = rows + [("Average", self.overall)]
        return metrics.format_table(rows)


def _train_and_test(cache, spec, name, sample_sets, test_ids, bands, seed, out_dir):
    run = RunResult(name)
    samples = sampler.SampleSet.merge(sample_sets, seed=seed)
    run.train_ids = sorted({r.scene_id for r in samples.split("train")})
    run.val_ids = sorted({r.scene_id for r in samples.split("val")})
    leaked = set(test_ids) & set(samples.scene_ids())
    if leaked:
        raise PatchMaskError(f"{name}: test scenes {sorted(leaked)} entered training sampling")
    scenes = {sid: cache.get(sid)[0] for sid in samples.scene_ids()}
    net_cfg = replace(spec.network_config, input_channels=len(bands))
    train_cfg = replace(spec.train_config, seed=seed)
    try:
        result = trainer.train(samples, scenes, net_cfg, train_cfg, out_dir=out_dir, bands=bands)
    except TrainingAborted as exc:
        log.error("%s aborted: %s", name, exc)
        run.aborted = str(exc)
        if exc.result is None:
            return run
        result = exc.result
    run.history = result.history
    icfg = inference.InferenceConfig(threshold=spec.threshold, bands=bands, tile_size=spec.tile_size,
                                     threads=spec.threads)
    for tid in test_ids:
        stack, truth = cache.get(tid)
        mask = inference.infer_scene(stack, icfg, params=result.params)
        report = metrics.evaluate(mask, truth)
        run.test_reports[tid] = report
        if out_dir:
            scene_io.write_mask(mask, os.path.join(out_dir, f"{tid}.pmmr"))
            with open(os.path.join(out_dir, f"{tid}.report.json"), "w") as fh:
                fh.write(report.to_json())
    if out_dir:
        with open(os.path.join(out_dir, "audit.json"), "w") as fh:
            json.dump({"test": list(test_ids), "train": run.train_ids, "val": run.val_ids}, fh, indent=2)
    return run


def _write_manifest(spec, cache, out_dir, extra=None):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    doc = spec.to_dict()
    doc["file_sha256"] = {p: _file_sha256(p) for e in cache.entries.values()
                          for p in (e.scene_path, e.truth_path)}
    doc.update(extra or {})
    with open(os.path.join(out_dir, "experiment.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=list)


def _write_summary(result, out_dir):
    if not out_dir:
        return
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(result.table())
    doc = {
        "mode": result.mode,
        "aborted": result.aborted,
        "overall": result.overall.to_dict() if result.overall else None,
        "groups": {k: (v.to_dict() if v else None) for k, v in result.groups.items()},
        "runs": {r.name: {sid: rep.to_dict() for sid, rep in r.test_reports.items()} for r in result.runs},
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def plan_leave_one_out(entries):
    """``[(land_type, fold_index, test_entry, train_entries)]`` in manifest order."""
    plan = []
    for lt, group in _group_by_land_type(entries).items():
        for i, test in enumerate(group):
            plan.append((lt, i, test, [e for e in group if e is not test]))
    return plan


def run_leave_one_out(spec, folds=None, land_types=None):
    """Per land type, hold out each scene in turn, train on the rest, test on it.

    ``folds`` / ``land_types`` optionally restrict which folds run.
    """
    cache = SceneCache(spec.scenes)
    cache.check_files()
    plan = plan_leave_one_out(spec.scenes)
    bands = resolve_bands(cache.bands(), spec.bands, spec.drop)
    _write_manifest(spec, cache, spec.out_dir)
    runs, by_type = [], {}
    for lt, i, test, train_entries in plan:
        if (land_types and lt not in land_types) or (folds is not None and i not in folds):
            continue
        seed = derive_seed(spec.seed, "loo", lt, i)
        sets = []
        for e in train_entries:
            stack, truth = cache.get(e.scene_id)
            sets.append(sampler.subsample(stack, truth, spec.quota, derive_seed(seed, e.scene_id),
                                          e.scene_id, spec.strict_grid))
        name = f"{lt}/fold{i:02d}_{test.scene_id}"
        out = os.path.join(spec.out_dir, lt, f"fold{i:02d}_{test.scene_id}") if spec.out_dir else None
        run = _train_and_test(cache, spec, name, sets, [test.scene_id], bands, seed, out)
        runs.append(run)
        by_type.setdefault(lt, []).append(run)
    groups = {}
    for lt, lt_runs in by_type.items():
        reports = [r.report for r in lt_runs if r.report is not None]
        groups[lt] = metrics.aggregate(reports) if reports else None
    present = [g for g in groups.values() if g is not None]
    result = ExperimentResult("land_type_specific", runs, groups,
                              metrics.aggregate(present) if present else None)
    _write_summary(result, spec.out_dir)
    return result


def plan_all_land_type(entries, repetitions, seed, val_fraction=0.2):
    """Per repetition: one random test scene per land type, the rest split
    80/20 (by scene) into train and validation pools."""
    groups = _group_by_land_type(entries)
    plans = []
    for rep in range(repetitions):
        rng = np.random.default_rng(derive_seed(seed, "all", rep))
        tests = [g[int(rng.integers(len(g)))] for g in groups.values()]
        test_ids = {t.scene_id for t in tests}
        pool = [e for e in entries if e.scene_id not in test_ids]
        pool = [pool[i] for i in rng.permutation(len(pool))]
        n_val = max(1, int(round(val_fraction * len(pool))))
        if len(pool) - n_val < 1:
            raise ConfigurationError("too few scenes for separate train and validation pools")
        plans.append({"test": tests, "val": pool[:n_val], "train": pool[n_val:],
                      "seed": derive_seed(seed, "all", rep, "train")})
    return plans


def run_all_land_type(spec, bands=None, out_dir=None, label="all_land_type"):
    cache = SceneCache(spec.scenes)
    cache.check_files()
    bands = bands or resolve_bands(cache.bands(), spec.bands, spec.drop)
    out_dir = out_dir if out_dir is not None else spec.out_dir
    _write_manifest(spec, cache, out_dir, {"bands": list(bands)})
    runs = []
    for rep, plan in enumerate(plan_all_land_type(spec.scenes, spec.repetitions, spec.seed)):
        sets = []
        for split in ("train", "val"):
            for e in plan[split]:
                stack, truth = cache.get(e.scene_id)
                sets.append(sampler.subsample_scene(stack, truth, spec.quota,
                                                    derive_seed(plan["seed"], e.scene_id),
                                                    e.scene_id, split))
        out = os.path.join(out_dir, f"rep{rep:02d}") if out_dir else None
        runs.append(_train_and_test(cache, spec, f"{label}/rep{rep:02d}", sets,
                                    [t.scene_id for t in plan["test"]], bands, plan["seed"], out))
    groups = {r.name: r.report for r in runs}
    present = [g for g in groups.values() if g is not None]
    result = ExperimentResult(label, runs, groups, metrics.aggregate(present) if present else None)
    _write_summary(result, out_dir)
    return result


def ablation_variants(scene_bands, bands=None, drop=None):
    """``[(row_name, band_tuple)]``: baseline first, then the requested variants.

    Without a drop or keep list, every drop-one variant plus the
    red/green/blue/NIR keep variant is produced.
    """
    scene_bands = tuple(scene_bands)
    variants = [("All bands", scene_bands)]
    if drop:
        resolve_bands(scene_bands, drop=drop)
        variants += [(f"Drop {BAND_LABELS.get(b, b)}", resolve_bands(scene_bands, drop=[b])) for b in drop]
    elif bands:
        name = ", ".join(BAND_LABELS.get(b, b) for b in bands)
        variants.append((name, resolve_bands(scene_bands, bands=bands)))
    else:
        variants += [(f"Drop {BAND_LABELS.get(b, b)}", resolve_bands(scene_bands, drop=[b]))
                     for b in scene_bands]
        if all(b in scene_bands for b in KEEP_FOUR):
            variants.append(("R, G, B, NIR", KEEP_FOUR))
    return variants


def run_ablation(spec):
    cache = SceneCache(spec.scenes)
    cache.check_files()
    variants = ablation_variants(cache.bands(), spec.bands, spec.drop)
    runs, rows, groups = [], [], {}
    for name, bands in variants:
        slug = name.lower().replace(", ", "_").replace(" ", "_")
        out = os.path.join(spec.out_dir, slug) if spec.out_dir else None
        res = run_all_land_type(spec, bands=bands, out_dir=out, label=slug)
        runs.extend(res.runs)
        groups[name] = res.overall
        if res.overall is not None:
            rows.append((name, res.overall))
    result = ExperimentResult("ablation", runs, groups, None, rows)
    _write_summary(result, spec.out_dir)
    return result


def run_experiment(spec, **kwargs):
    if spec.mode == "land_type_specific":
        return run_leave_one_out(spec, **kwargs)
    if spec.mode == "all_land_type":
        return run_all_land_type(spec)
    return run_ablation(spec)
