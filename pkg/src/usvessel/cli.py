"""Command-line entry point: ``usvessel <subcommand> ...``.

Subcommands: compound, preprocess, phantom, train, infer, evaluate.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors are reported on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import augment, compound, metrics, phantom, train, unet, volume

log = logging.getLogger("usvessel")

# (block, key) defaults taken from the published method; everything else is ours
PUBLISHED_VALUES = {
    ("preprocess", "factor"),
    ("preprocess", "median"),
    ("preprocess", "normalize"),
    ("preprocess", "margin"),
    ("augment", "rot_deg"),
    ("augment", "scale_frac"),
    ("augment", "elastic_sd"),
    ("augment", "patch_size"),
    ("augment", "patches_per_volume"),
    ("unet", "levels"),
    ("unet", "filter_divisor"),
    ("train", "learning_rate"),
    ("train", "l1_weight"),
    ("train", "batch_size"),
    ("train", "max_epochs"),
}

PREPROCESS_DEFAULTS = {"factor": 0.4, "median": True, "normalize": True, "scale": True, "margin": 32}
INFER_DEFAULTS = {"tile": [152, 152, 96], "overlap": 16, "threshold": 0.5}

SEEDED_COMMANDS = {"train", "phantom"}


class UsageError(Exception):
    pass


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def default_config():
    return {
        "seed": None,
        "preprocess": dict(PREPROCESS_DEFAULTS),
        "compound": {k: _jsonable(v) for k, v in asdict(compound.CompoundConfig()).items()},
        "augment": {k: _jsonable(v) for k, v in asdict(augment.AugmentConfig()).items()},
        "unet": {f.name: getattr(unet.UNetConfig(), f.name) for f in fields(unet.UNetConfig)},
        "train": {k: _jsonable(v) for k, v in asdict(train.TrainConfig()).items()},
        "phantom": {k: _jsonable(v) for k, v in asdict(phantom.PhantomConfig()).items()},
        "infer": {k: _jsonable(v) for k, v in INFER_DEFAULTS.items()},
    }


def resolve_config(path=None, seed=None):
    """Merge defaults, an optional JSON file and a seed override.

    Returns ``(config, origins)`` where ``origins[block][key]`` is one of
    ``paper``, ``default``, ``config`` or ``cli``.
    """
    cfg = default_config()
    origins = {
        block: {k: ("paper" if (block, k) in PUBLISHED_VALUES else "default") for k in values}
        for block, values in cfg.items()
        if isinstance(values, dict)
    }
    origins["seed"] = "default"
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        for block, values in user.items():
            if block == "seed":
                cfg["seed"] = int(values)
                origins["seed"] = "config"
                continue
            if block not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown config block {block!r}")
            for k, v in values.items():
                if k not in cfg[block]:
                    raise UsageError(f"unknown config key {block}.{k}")
                cfg[block][k] = v
                origins[block][k] = "config"
    if seed is not None:
        cfg["seed"] = int(seed)
        origins["seed"] = "cli"
    if cfg["seed"] is not None:
        for block in ("train", "augment", "phantom"):
            cfg[block]["seed"] = cfg["seed"]
            origins[block]["seed"] = origins["seed"]
    return cfg, origins


def annotated(cfg, origins):
    out = {}
    for block, values in cfg.items():
        if isinstance(values, dict):
            out[block] = {k: {"value": v, "origin": origins[block][k]} for k, v in values.items()}
        else:
            out[block] = {"value": values, "origin": origins[block]}
    return out


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _build(factory, values, what):
    try:
        return factory(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} configuration: {exc}") from exc


def _emit(obj):
    print(canonical_json(obj))


# -- subcommands --------------------------------------------------------------


def cmd_compound(args, cfg):
    cc = _build(compound.CompoundConfig, cfg["compound"], "compound")
    frames = compound.read_frame_stream(args.frames_dir)
    vol, cov = compound.compound(frames, cc)
    out = Path(args.out)
    cov_path = Path(args.coverage) if args.coverage else out.with_name(out.stem + "_coverage" + out.suffix)
    volume.write_volume(vol, out)
    volume.write_volume(cov, cov_path)
    report = {"dims": list(vol.dims), "frames": len(frames), "covered_fraction": float(cov.data.mean())}
    if args.reference:
        ref = volume.read_volume(args.reference)
        report["ncc"] = compound.reference_ncc(vol, cov, ref)
    _emit(report)
    return 0


def cmd_preprocess(args, cfg):
    p = cfg["preprocess"]
    vol = volume.read_volume(args.input)
    out = volume.preprocess(
        vol, factor=p["factor"], median=p["median"], normalize=p["normalize"], scale=p["scale"], margin=p["margin"]
    )
    volume.write_volume(out, args.output)
    _emit({"input_dims": list(vol.dims), "output_dims": list(out.dims), "kind": vol.kind})
    return 0


def _pair_preprocessor(p):
    kw = dict(factor=p["factor"], median=p["median"], normalize=p["normalize"], scale=p["scale"], margin=p["margin"])

    def transform(image, label):
        return volume.preprocess(image, **kw), volume.preprocess(label, **kw)

    return transform


def cmd_phantom(args, cfg):
    pc = _build(phantom.PhantomConfig, cfg["phantom"], "phantom")
    splits = args.splits.split(",") if args.splits else None
    transform = _pair_preprocessor(cfg["preprocess"]) if args.preprocess else None
    manifest = phantom.write_phantoms(args.n, args.out_dir, pc, splits=splits, transform=transform)
    _emit({"manifest": str(manifest), "n": args.n})
    return 0


def cmd_train(args, cfg):
    tc = _build(train.TrainConfig, cfg["train"], "train")
    uc = _build(unet.UNetConfig, cfg["unet"], "unet")
    ac = _build(augment.AugmentConfig, cfg["augment"], "augment")
    if not Path(args.manifest).exists():
        raise UsageError(f"manifest not found: {args.manifest}")
    _, history = train.train(args.manifest, tc, uc, ac, out_dir=args.out_dir)
    _emit({"steps": len(history), "final_loss": history[-1]["train_loss"] if history else None})
    return 0


def cmd_infer(args, cfg):
    ic = cfg["infer"]
    params = unet.load_params(args.params)
    vol = volume.read_volume(args.volume, kind="intensity")
    label = unet.infer_volume(params, vol, tuple(ic["tile"]), ic["overlap"], ic["threshold"])
    volume.write_volume(label, args.out)
    _emit({"dims": list(label.dims), "foreground": int(label.data.sum())})
    return 0


def cmd_evaluate(args, cfg):
    pred_dir, truth_dir = Path(args.pred_dir), Path(args.truth_dir)
    truths = sorted(truth_dir.glob("*.mhd")) + sorted(truth_dir.glob("*.mha"))
    if not truths:
        raise UsageError(f"no label volumes found in {truth_dir}")
    reports = []
    for t in truths:
        p = pred_dir / t.name
        if not p.exists():
            raise UsageError(f"missing prediction for {t.name}")
        pred = volume.read_volume(p, kind="label")
        truth = volume.read_volume(t, kind="label")
        reports.append(metrics.evaluate(pred, truth, volume_id=t.stem))
        if args.overlay_dir:
            Path(args.overlay_dir).mkdir(parents=True, exist_ok=True)
            volume.write_volume(metrics.overlay(pred, truth), Path(args.overlay_dir) / f"{t.stem}_overlay.mhd")
    out = Path(args.out_csv)
    metrics.write_reports_csv(reports, out)
    summary = metrics.aggregate(reports)
    metrics.write_summary_json(summary, Path(args.summary) if args.summary else out.with_suffix(".json"))
    _emit(summary._asdict())
    return 0


COMMANDS = {
    "compound": cmd_compound,
    "preprocess": cmd_preprocess,
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="usvessel", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="seed for train/phantom/augment streams")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    parser.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("compound", help="reconstruct a volume from a tracked frame stream")
    p.add_argument("frames_dir")
    p.add_argument("out")
    p.add_argument("--coverage", help="coverage output path (default: <out>_coverage.mhd)")
    p.add_argument("--reference", help="reference volume for an NCC report")

    p = sub.add_parser("preprocess", help="resample, median filter, normalize and pad a volume")
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("phantom", help="generate synthetic vessel phantoms and a manifest")
    p.add_argument("n", type=int)
    p.add_argument("out_dir")
    p.add_argument("--splits", help="comma-separated split tag per phantom")
    p.add_argument("--preprocess", action="store_true", help="apply the preprocess block before writing")

    p = sub.add_parser("train", help="train the U-Net from a dataset manifest")
    p.add_argument("manifest")
    p.add_argument("out_dir")

    p = sub.add_parser("infer", help="segment a preprocessed volume")
    p.add_argument("params")
    p.add_argument("volume")
    p.add_argument("out")

    p = sub.add_parser("evaluate", help="Dice/IoU of predictions against reference labels")
    p.add_argument("pred_dir")
    p.add_argument("truth_dir")
    p.add_argument("out_csv")
    p.add_argument("--overlay-dir", help="also write TP/FP/FN overlay volumes here")
    p.add_argument("--summary", help="summary JSON path (default: <out_csv>.json)")
    return parser


def _fail(code, message, kind):
    print(canonical_json({"error": message, "type": kind}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, origins = resolve_config(args.config, args.seed)
        if args.print_config:
            print(canonical_json(annotated(cfg, origins)))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if args.command in SEEDED_COMMANDS and cfg["seed"] is None:
            raise UsageError(f"{args.command} requires a seed (--seed or \"seed\" in the config)")
        limiter = None
        if args.threads is not None:
            try:
                from threadpoolctl import threadpool_limits
            except ImportError:
                log.warning("threadpoolctl not installed; --threads ignored")
            else:
                limiter = threadpool_limits(args.threads)
        try:
            return COMMANDS[args.command](args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except compound.FrameIndexError as exc:
        return _fail(2, str(exc), "usage")
    except UsageError as exc:
        return _fail(2, str(exc), "usage")
    except FileNotFoundError as exc:
        return _fail(2, str(exc), "usage")
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        return _fail(1, str(exc), type(exc).__name__)


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
