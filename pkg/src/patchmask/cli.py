"""``patchmask`` command line: data import, sampling, training, inference, evaluation, experiments."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace

import yaml

from . import experiments, inference, metrics, resnet, sampler, scene as scene_io, synth, trainer
from .errors import ConfigurationError, PatchMaskError

log = logging.getLogger("patchmask")

OUT_ENV = "PATCHMASK_OUT"
DEFAULT_OUT = "patchmask-out"


def _band_list(text):
    if text is None:
        return None
    return tuple(b.strip() for b in text.split(",") if b.strip())


def load_config(path):
    """YAML mapping with optional sections ``network``, ``train``, ``experiment``."""
    if not path:
        return {}
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: configuration must be a mapping")
    return doc


def _section(doc, name, cls):
    values = doc.get(name) or {}
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} settings {sorted(unknown)}")
    return values


def _setting(args, doc, key, default=None):
    """Flag value when given, else the config file value, else ``default``."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return doc.get(key, default)


def out_root(args, doc):
    return _setting(args, doc, "out") or os.environ.get(OUT_ENV) or DEFAULT_OUT


def build_configs(args, doc):
    seed = int(_setting(args, doc, "seed", 0))
    net = resnet.NetworkConfig(**_section(doc, "network", resnet.NetworkConfig))
    train_vals = dict(_section(doc, "train", trainer.TrainConfig))
    train_vals["seed"] = seed
    for key in ("max_epochs", "min_epochs"):
        if getattr(args, key, None) is not None:
            train_vals[key] = getattr(args, key)
    if "min_epochs" not in train_vals and train_vals.get("max_epochs", 120) < 80:
        train_vals["min_epochs"] = train_vals["max_epochs"]
    return net, trainer.TrainConfig(**train_vals), seed


def _bands(args, doc):
    bands = _band_list(args.bands) if getattr(args, "bands", None) else doc.get("bands")
    drop = _band_list(args.drop) if getattr(args, "drop", None) else doc.get("drop")
    if bands and drop:
        raise ConfigurationError("give either a band list or a drop list, not both")
    return (tuple(bands) if bands else None), (tuple(drop) if drop else None)


# --------------------------------------------------------------------------
# subcommands


def cmd_import(args, doc):
    obj = scene_io.import_raw(args.header)
    if isinstance(obj, scene_io.BandStack):
        scene_io.write_bandstack(obj, args.output)
        print(f"wrote band stack {obj.shape} bands={','.join(obj.bands)} to {args.output}")
    else:
        scene_io.write_mask(obj, args.output)
        print(f"wrote mask {obj.shape} to {args.output}")
    return 0


def cmd_synth(args, doc):
    out = out_root(args, doc)
    os.makedirs(out, exist_ok=True)
    seed = int(_setting(args, doc, "seed", 0))
    land_types = _band_list(args.land_types)
    entries = []
    for lt in land_types:
        background = lt if lt in synth.BACKGROUNDS else "vegetation"
        for i in range(args.count):
            sid = f"{lt}_{i:02d}"
            spec = synth.SynthSpec(width=args.width, height=args.height, cloud_count=args.cloud_count,
                                   background=background, seed=experiments.derive_seed(seed, "synth", lt, i))
            stack, truth = synth.generate_synthetic(spec)
            sp, tp = os.path.join(out, f"{sid}.pmbs"), os.path.join(out, f"{sid}_truth.pmmr")
            scene_io.write_bandstack(stack, sp)
            scene_io.write_mask(truth, tp)
            entries.append(experiments.SceneEntry(sid, lt, sp, tp))
    manifest = os.path.join(out, "scenes.csv")
    experiments.write_scene_manifest(entries, manifest)
    print(f"wrote {len(entries)} synthetic scenes and {manifest}")
    return 0


def cmd_sample(args, doc):
    stack, truth = scene_io.prepare(scene_io.read_bandstack(args.scene), scene_io.read_mask(args.truth))
    seed = int(_setting(args, doc, "seed", 0))
    quota = args.quota or (doc.get("experiment") or {}).get("quota", 10_000)
    sid = args.scene_id or os.path.splitext(os.path.basename(args.scene))[0]
    samples = sampler.subsample(stack, truth, quota, seed, sid, strict=args.strict)
    samples.write(args.output)
    c = samples.counts()
    print(f"{sid}: {c['train']} train, {c['val']} val centers -> {args.output}")
    for (s, q), n in samples.shortfalls.items():
        print(f"  shortfall: sub-image {q} short by {n}")
    return 0


def cmd_train(args, doc):
    net, cfg, _ = build_configs(args, doc)
    entries = experiments.read_scene_manifest(args.scenes)
    cache = experiments.SceneCache(entries)
    cache.check_files()
    samples = sampler.SampleSet.merge([sampler.SampleSet.read(p) for p in args.samples], seed=cfg.seed)
    bands, drop = _bands(args, doc)
    bands = experiments.resolve_bands(cache.bands(), bands, drop)
    net = replace(net, input_channels=len(bands))
    scenes = {sid: cache.get(sid)[0] for sid in samples.scene_ids()}
    out = out_root(args, doc)
    result = trainer.train(samples, scenes, net, cfg, out_dir=out, bands=bands)
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f}; checkpoint {result.checkpoint_path}")
    return 0


def _threshold(args, doc):
    return float(_setting(args, doc, "threshold", 0.5))


def cmd_infer(args, doc):
    bands, drop = _bands(args, doc)
    stack = scene_io.read_bandstack(args.scene)
    if drop:
        stack = stack.drop(drop)
    cfg = inference.InferenceConfig(checkpoint=args.checkpoint, threshold=_threshold(args, doc), bands=bands,
                                    tile_size=args.tile_size, threads=int(_setting(args, doc, "threads", 1)))
    mask = inference.infer_scene(stack, cfg)
    scene_io.write_mask(mask, args.output)
    counts = mask.counts()
    print(f"wrote {args.output}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    if args.png:
        for p in inference.render_png(mask, args.png, scene=stack if args.rgb else None):
            print(f"wrote {p}")
    return 0


def cmd_evaluate(args, doc):
    pred, truth = scene_io.read_mask(args.prediction), scene_io.read_mask(args.truth)
    report = metrics.evaluate(pred, truth)
    print(metrics.format_table([(os.path.basename(args.prediction), report)]), end="")
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report.to_json())
    return 0


def cmd_rethreshold(args, doc):
    mask = inference.rethreshold(scene_io.read_mask(args.mask), _threshold(args, doc))
    scene_io.write_mask(mask, args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_render(args, doc):
    mask = scene_io.read_mask(args.mask)
    stack = scene_io.read_bandstack(args.scene) if args.scene else None
    for p in inference.render_png(mask, args.output, scene=stack):
        print(f"wrote {p}")
    return 0


def cmd_experiment(args, doc):
    net, cfg, seed = build_configs(args, doc)
    exp = dict(_section(doc, "experiment", experiments.ExperimentSpec))
    bands, drop = _bands(args, doc)
    for key in ("repetitions", "quota"):
        if getattr(args, key) is not None:
            exp[key] = getattr(args, key)
    if args.strict:
        exp["strict_grid"] = True
    exp.pop("threads", None)
    exp.pop("threshold", None)
    spec = experiments.ExperimentSpec(
        mode=args.mode, scenes=experiments.read_scene_manifest(args.manifest), bands=bands, drop=drop,
        train_config=cfg, network_config=net, seed=seed, out_dir=out_root(args, doc),
        threshold=_threshold(args, doc), threads=int(_setting(args, doc, "threads", 1)), **exp)
    kwargs = {}
    if args.mode == "land_type_specific" and args.folds:
        kwargs["folds"] = [int(f) for f in args.folds.split(",")]
    result = experiments.run_experiment(spec, **kwargs)
    print(result.table(), end="")
    if result.aborted:
        print(f"aborted runs: {', '.join(result.aborted)}", file=sys.stderr)
    return result.exit_status


# --------------------------------------------------------------------------


def _common(p, out=True):
    p.add_argument("--config", help="YAML configuration file; flags override its values")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")


def _band_flags(p):
    p.add_argument("--bands", help="comma-separated bands to keep")
    p.add_argument("--drop", help="comma-separated bands to drop")


def build_parser():
    parser = argparse.ArgumentParser(prog="patchmask", description="Patch-based cloud and shadow masking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", help="convert raw planes plus a YAML header to PMBS/PMMR")
    p.add_argument("header")
    p.add_argument("output")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("synth", help="generate synthetic scenes, truths and a scene manifest")
    _common(p)
    p.add_argument("--count", type=int, default=8, help="scenes per land type")
    p.add_argument("--land-types", default="vegetation")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--cloud-count", type=float, default=10.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="draw grid-split training/validation centers from one scene")
    _common(p, out=False)
    p.add_argument("scene")
    p.add_argument("truth")
    p.add_argument("output")
    p.add_argument("--quota", type=int)
    p.add_argument("--scene-id")
    p.add_argument("--strict", action="store_true", help="exclude windows crossing the grid lines")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a network from sample manifests")
    _common(p)
    _band_flags(p)
    p.add_argument("--scenes", required=True, help="scene manifest CSV")
    p.add_argument("--samples", required=True, action="append", help="sample manifest (repeatable)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--min-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify every valid pixel of a scene")
    _common(p, out=False)
    _band_flags(p)
    p.add_argument("scene")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--tile-size", type=int, default=2048)
    p.add_argument("--png", help="also render the mask to this PNG")
    p.add_argument("--rgb", action="store_true", help="with --png, also write an RGB composite")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="compare a predicted mask with ground truth")
    p.add_argument("prediction")
    p.add_argument("truth")
    p.add_argument("--json")
    p.set_defaults(func=cmd_evaluate, config=None)

    p = sub.add_parser("rethreshold", help="relabel a mask from its stored confidences")
    p.add_argument("mask")
    p.add_argument("output")
    p.add_argument("--threshold", type=float, required=True)
    p.set_defaults(func=cmd_rethreshold, config=None)

    p = sub.add_parser("render", help="write a PNG of a mask (and optionally an RGB composite)")
    p.add_argument("mask")
    p.add_argument("output")
    p.add_argument("--scene")
    p.set_defaults(func=cmd_render, config=None)

    p = sub.add_parser("experiment", help="run a leave-one-out, all-land-type or ablation experiment")
    _common(p)
    _band_flags(p)
    p.add_argument("mode", choices=experiments.MODES)
    p.add_argument("--manifest", required=True, help="scene manifest CSV")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--quota", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--folds", help="comma-separated fold indices to run (leave-one-out only)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--min-epochs", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = load_config(getattr(args, "config", None))
        return args.func(args, doc)
    except PatchMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
