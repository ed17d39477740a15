"""Command-line entry point.

Every flag can be supplied (lowest to highest precedence) as a built-in
default, a ``key = value`` entry in the ``--config`` file (section named after
the subcommand, or ``[common]``), an environment variable
``VESSELSEG_<FLAG>`` (dashes become underscores), or on the command line.

Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .deformation import DeformationParams, sample_field
from .frangi import VesselnessParams, frangi_multiscale
from .losses import ConsistencyCriterion
from .metrics import diff_overlay, evaluate, format_table, write_records
from .patches import PatchSpec
from .phantom import PhantomConfig, load_dataset, make_dataset, save_dataset
from .plotting import metric_bars, mip_panel, training_curves
from .trainer import TrainingData, TrainRunConfig, predict_volume, train
from .unet import NetworkConfig, load_checkpoint
from .volume import Volume3D, mip, read_volume, write_mip_png, write_nifti, write_raw, write_rgb_png

log = logging.getLogger("vesselseg")

ENV_PREFIX = "VESSELSEG_"
COMMANDS = ("phantom", "train", "predict", "evaluate", "deform", "frangi", "mip")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _onoff(text: str) -> bool:
    t = str(text).lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="vesselseg", description="Small-vessel segmentation toolkit.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"vesselseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--threads", type=int, default=0, help="BLAS threads; 0 leaves the library default, 1 is fully deterministic")
        p.add_argument("--log-level", default="INFO")

    p = sub.add_parser("phantom", help="generate a synthetic vessel dataset", formatter_class=fmt)
    common(p)
    p.add_argument("--n", type=int, default=11, help="number of volumes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=_ints, default="96,96,96")
    p.add_argument("--vessels", type=_ints, default="8,14", help="min,max vessel count")
    p.add_argument("--radius-range", type=_floats, default="0.75,3.0")
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--blur-sigma", type=float, default=0.6)
    p.add_argument("--gap-probability", type=float, default=0.0)

    p = sub.add_parser("train", help="train the Siamese multi-scale U-Net", formatter_class=fmt)
    common(p)
    p.add_argument("--data", required=True, help="dataset directory written by 'phantom'")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patches-per-epoch", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--consistency", type=_onoff, default="on")
    p.add_argument("--consistency-kind", choices=("mse", "focal-tversky"), default="mse")
    p.add_argument("--consistency-weight", type=float, default=1.0)
    p.add_argument("--branch2", type=_onoff, default="on", help="supervise the deformed branch")
    p.add_argument("--mss", type=int, default=3, help="number of supervised decoder scales")
    p.add_argument("--mss-weights", type=_floats, default=None, help="per-scale weights, finest first")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--normalization", choices=("none", "batch"), default="none")
    p.add_argument("--patch-size", type=_ints, default="64,64,64")
    p.add_argument("--stride", type=_ints, default="32,32,16")
    p.add_argument("--val-stride", type=_ints, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--labels", choices=("corrupt", "clean"), default="corrupt")
    p.add_argument("--checkpoint-every", type=int, default=1)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("predict", help="segment volumes with a trained checkpoint", formatter_class=fmt)
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="volume file or directory of .nii files")
    p.add_argument("--out", required=True)
    p.add_argument("--ref", default=None, help="reference mask file or directory, for overlays")
    p.add_argument("--patch-size", type=_ints, default="64,64,64")
    p.add_argument("--stride", type=_ints, default="32,32,16")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")

    p = sub.add_parser("evaluate", help="Dice/IoU report against reference masks", formatter_class=fmt)
    common(p)
    p.add_argument("--pred", action="append", required=True, help="prediction mask directory (repeatable)")
    p.add_argument("--method", action="append", default=None, help="method label per --pred")
    p.add_argument("--kind", action="append", default=None, help="method type per --pred, e.g. 'Deep learning'")
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None, help="report directory; the first --pred when omitted")
    p.add_argument("--images", default=None, help="intensity volumes for overlay figures")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")

    p = sub.add_parser("deform", help="sample and dump a deformation field", formatter_class=fmt)
    common(p)
    p.add_argument("--dims", type=_ints, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-range", type=_floats, default="1.0,5.0")
    p.add_argument("--kernel-size", type=int, default=15)
    p.add_argument("--kernel-sigma", type=float, default=100.0)
    p.add_argument("--shared-slices", type=_onoff, default="off")

    p = sub.add_parser("frangi", help="multiscale vesselness baseline", formatter_class=fmt)
    common(p)
    p.add_argument("--input", required=True, help="volume file or directory of .nii files")
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=_floats, default="0.5,1.0,1.5,2.0")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--c", type=float, default=None, help="structure constant; default half the max Hessian norm")
    p.add_argument("--threshold", type=float, default=0.5, help="fraction of the max response")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")

    p = sub.add_parser("mip", help="maximum-intensity projection to PNG", formatter_class=fmt)
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--window", type=_floats, default=None, help="lo,hi intensity window")

    # every optional flag shows its default, including those without help text
    for name in COMMANDS:
        for action in _subparser(parser, name)._actions:
            if action.option_strings and action.help is None and not action.required:
                action.help = "(default: %(default)s)"
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _layered_defaults(sub: argparse.ArgumentParser, command: str, config_path: str | None) -> None:
    """Fold config-file and environment values into the parser defaults."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    overrides: dict[str, str] = {}
    if config_path:
        cp = configparser.ConfigParser()
        if not cp.read(config_path):
            raise UsageError(f"cannot read config file {config_path}")
        for section in ("common", command):
            if cp.has_section(section):
                for key, value in cp.items(section):
                    dest = key.replace("-", "_")
                    if dest not in actions:
                        log.warning("config %s: unknown key %r in [%s] ignored", config_path, key, section)
                        continue
                    overrides[dest] = value
    for dest in actions:
        env = os.environ.get(ENV_PREFIX + dest.upper())
        if env is not None:
            overrides[dest] = env
    for dest, raw in overrides.items():
        action = actions[dest]
        value = action.type(raw) if action.type is not None else raw
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{dest}={raw!r} not in {sorted(action.choices)}")
        sub.set_defaults(**{dest: [value] if isinstance(action, argparse._AppendAction) else value})
        action.required = False


def parse(argv):
    parser = build_parser()
    argv = list(argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help", "--version"):
            parser.parse_args(argv)
        raise UsageError(f"expected one of {', '.join(COMMANDS)}; got {argv[0] if argv else 'nothing'}")
    command = argv[0]
    sub = _subparser(parser, command)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv[1:])
    _layered_defaults(sub, command, known.config)
    args = parser.parse_args(argv)
    return parser, args


def resolved_argv(parser, args) -> list[str]:
    """Fully explicit argv that reproduces ``args``."""
    sub = _subparser(parser, args.command)
    out = [args.command]
    for action in sub._actions:
        if not action.option_strings or action.dest in ("help", "config"):
            continue
        value = getattr(args, action.dest)
        if value is None:
            continue
        flag = action.option_strings[-1]
        if isinstance(action, argparse._AppendAction):
            for v in value:
                out += [flag, _fmt(v)]
        else:
            out += [flag, _fmt(value)]
    return out


def _set_threads(n: int):
    if n and n > 0:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(n)
    return None


def _nii_files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
        if not files:
            raise UsageError(f"no .nii files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return [path]


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


# ---------------------------------------------------------------------------
# commands; each returns (resolved config dict, artifact paths)

def cmd_phantom(args):
    cfg = PhantomConfig(
        dims=args.dims, vessel_count=args.vessels, radius_range=args.radius_range,
        noise_sigma=args.noise_sigma, blur_sigma=args.blur_sigma, gap_probability=args.gap_probability,
    )
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(args.n, cfg, args.seed)
    manifest = save_dataset(ds, out)
    split = {k: len(v) for k, v in ds.split.items()}
    log.info("wrote %d phantoms to %s, split %s", args.n, out, split)
    artifacts = [str(out / "manifest.json")] + [str(out / f) for files in manifest["files"].values() for f in files.values()]
    return {"phantom": asdict(cfg), "split_sizes": split}, artifacts


def _train_configs(args):
    netcfg = NetworkConfig(depth=args.depth, base_channels=args.base_channels,
                           supervision_scales=args.mss, normalization=args.normalization)
    netcfg.validate()
    cfg = TrainRunConfig(
        epochs=args.epochs, batch_size=args.batch_size, patches_per_epoch=args.patches_per_epoch,
        seed=args.seed, consistency=args.consistency, branch2=args.branch2,
        mss_weights=args.mss_weights,
        criterion=ConsistencyCriterion(args.consistency_kind, args.consistency_weight),
        patch=PatchSpec(args.patch_size, args.stride), val_stride=args.val_stride, lr=args.lr,
        dtype=args.precision, checkpoint_every=args.checkpoint_every,
        prefetch=0 if args.threads == 1 else 2,
    )
    cfg.validate()
    return netcfg, cfg


def cmd_train(args):
    netcfg, cfg = _train_configs(args)
    ds = load_dataset(args.data)
    attr = "corrupted" if args.labels == "corrupt" else "label"
    data = TrainingData(
        [c.image.data for c in ds["train"]], [getattr(c, attr).data for c in ds["train"]],
        [c.image.data for c in ds.get("val", [])], [getattr(c, attr).data for c in ds.get("val", [])],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume is None and (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    result = train(data, cfg, netcfg, out, resume=args.resume)
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    fig = training_curves(records, out / "training_curves.png")
    log.info("best validation Dice %.4f", result.best_val_dice)
    return ({"network": asdict(netcfg), "train": cfg.to_dict(), "labels": args.labels},
            [str(out / "best.ckpt"), str(out / "last.ckpt"), str(out / "metrics.jsonl"), str(fig)])


def _match_ref(ref, name: str) -> Path | None:
    if ref is None:
        return None
    ref = Path(ref)
    if ref.is_file():
        return ref
    for suffix in (".nii", ".nii.gz"):
        cand = ref / f"{name}{suffix}"
        if cand.exists():
            return cand
    return None


def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    spec = PatchSpec(args.patch_size, args.stride)
    spec.check_divisible(ckpt.params.config.divisor)
    out = Path(args.out)
    (out / "probability").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    artifacts = []
    for path in _nii_files(args.input):
        name = _stem(path)
        vol = read_volume(path)
        prob, mask = predict_volume(ckpt.params, vol, spec, args.threshold)
        write_nifti(mask, out / f"{name}.nii")
        write_nifti(prob, out / "probability" / f"{name}.nii")
        base = mip(vol, args.axis)
        write_mip_png(mip(prob, args.axis), out / "figures" / f"{name}_prob_mip.png", (0.0, 1.0))
        panels, titles = [base, mip(prob, args.axis)], ["input MIP", "probability MIP"]
        ref_path = _match_ref(args.ref, name)
        if ref_path is not None:
            overlay = diff_overlay(mask, read_volume(ref_path), base, args.axis)
            write_rgb_png(overlay, out / "figures" / f"{name}_overlay.png")
            panels.append(overlay)
            titles.append("over (green) / under (red)")
        mip_panel(panels, titles, out / "figures" / f"{name}_panel.png")
        artifacts += [str(out / f"{name}.nii"), str(out / "probability" / f"{name}.nii")]
    return {"checkpoint": args.checkpoint, "patch": asdict(spec), "threshold": args.threshold}, artifacts


def cmd_evaluate(args):
    methods = args.method or []
    if methods and len(methods) != len(args.pred):
        raise UsageError("give one --method per --pred")
    methods = methods or [Path(p).name for p in args.pred]
    kinds = args.kind or [""] * len(methods)
    if len(kinds) != len(methods):
        raise UsageError("give one --kind per --pred")
    refs = {_stem(p): p for p in _nii_files(args.ref)}
    reports = []
    for pred_dir, method in zip(args.pred, methods):
        preds = {_stem(p): p for p in _nii_files(pred_dir)}
        missing = sorted(set(refs) - set(preds))
        if missing:
            raise UsageError(f"{pred_dir}: no prediction for {', '.join(missing)}")
        names = sorted(refs)
        reports.append(evaluate([read_volume(preds[n]) for n in names],
                                [read_volume(refs[n]) for n in names], method, names))
    out = Path(args.out or args.pred[0])
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(reports, kinds)
    print(table)
    (out / "report.txt").write_text(table + "\n")
    write_records(reports, out / "report.jsonl")
    artifacts = [str(out / "report.txt"), str(out / "report.jsonl"), str(metric_bars(reports, out / "metrics.png"))]
    if args.images:
        images = {_stem(p): p for p in _nii_files(args.images)}
        for n in sorted(refs):
            if n not in images:
                continue
            base = mip(read_volume(images[n]), args.axis)
            ref = read_volume(refs[n])
            panels = [base] + [
                diff_overlay(read_volume(Path(d) / f"{n}.nii"), ref, base, args.axis) for d in args.pred
            ]
            artifacts.append(str(mip_panel(panels, ["input MIP", *methods], out / f"{n}_comparison.png")))
    summary = {r.method: {k: list(v) for k, v in r.summary.items()} for r in reports}
    return {"methods": methods, "summary": summary}, artifacts


def cmd_deform(args):
    params = DeformationParams(scale_range=args.scale_range, kernel_size=args.kernel_size,
                               kernel_sigma=args.kernel_sigma, shared_slices=args.shared_slices)
    field = sample_field(args.dims, params, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_raw(Volume3D(field.dx), out / "dx.raw")
    write_raw(Volume3D(field.dy), out / "dy.raw")
    magnitude = np.sqrt(field.dx ** 2 + field.dy ** 2)
    write_mip_png(mip(magnitude, "z"), out / "magnitude_mip.png")
    return {"deformation": asdict(params), "dims": list(args.dims)}, [
        str(out / "dx.raw"), str(out / "dy.raw"), str(out / "magnitude_mip.png")]


def cmd_frangi(args):
    params = VesselnessParams(scales=args.scales, alpha=args.alpha, beta=args.beta, c=args.c,
                              threshold=args.threshold)
    params.validate()
    out = Path(args.out)
    (out / "vesselness").mkdir(parents=True, exist_ok=True)
    artifacts = []
    for path in _nii_files(args.input):
        name = _stem(path)
        vol = read_volume(path)
        ves, mask = frangi_multiscale(vol, params)
        write_nifti(mask, out / f"{name}.nii")
        write_nifti(ves, out / "vesselness" / f"{name}.nii")
        write_mip_png(mip(ves, args.axis), out / f"{name}_mip.png", (0.0, 1.0))
        artifacts += [str(out / f"{name}.nii"), str(out / "vesselness" / f"{name}.nii"), str(out / f"{name}_mip.png")]
    return {"vesselness": asdict(params)}, artifacts


def cmd_mip(args):
    vol = read_volume(args.input)
    write_mip_png(mip(vol, args.axis), args.out, args.window)
    return {"axis": args.axis, "window": args.window}, [args.out]


HANDLERS = {
    "phantom": cmd_phantom, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "deform": cmd_deform, "frangi": cmd_frangi, "mip": cmd_mip,
}


def _manifest_path(args) -> Path:
    out = Path(getattr(args, "out", None) or args.pred[0])
    if args.command == "mip":
        return out.with_name(out.name + ".manifest.json")
    return out / "manifest.json" if args.command != "phantom" else out / "run_manifest.json"


def run(argv) -> int:
    try:
        parser, args = parse(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    limiter = _set_threads(args.threads)
    try:
        config, artifacts = HANDLERS[args.command](args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    manifest = {
        "command": args.command,
        "argv": resolved_argv(parser, args),
        "config": config,
        "seed": getattr(args, "seed", None),
        "artifacts": artifacts,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "version": __version__,
    }
    path = _manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
