"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from importlib import metadata
from pathlib import Path

from . import evaluation, plotting
from .errors import ArgumentError, FreqSynthError
from .frequency import GaussianSpec, decompose
from .inference import plan_windows, predict_volume
from .network import load_checkpoint, param_count, save_checkpoint
from .synthetic import GeneratorSpec, generate_dataset, load_pairs
from .training import TrainConfig, _triple, build_and_train, parse_config_text, write_loss_curve
from .volume import (Domain, HURange, denormalize_ct, export_slices, normalize_mr, read_volume,
                     write_volume)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


def artifact_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def write_provenance(path, command, args, extra=None):
    lines = [f"command = {command}", f"version = {artifact_version()}"]
    for key, value in sorted(vars(args).items()):
        if key not in ("func", "command"):
            lines.append(f"arg.{key} = {value}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands
def cmd_gen_data(args):
    spec = GeneratorSpec(dims=_triple(args.dims), seed=args.seed, n_blobs=args.n_blobs,
                         shell_contrast=args.shell_contrast, noise_sigma=args.noise_sigma)
    entries = generate_dataset(spec, args.pairs, args.out)
    write_provenance(Path(args.out) / "provenance.txt", "gen-data", args)
    print(f"wrote {len(entries)} pairs to {args.out}")


def cmd_decompose(args):
    volume = read_volume(args.input)
    if volume.domain not in (Domain.CT_HU, Domain.CT_NORM):
        volume = volume.like(volume.data, Domain.CT_HU)
    pair = decompose(volume, GaussianSpec(args.sigma))
    src = Path(args.input)
    out_dir = Path(args.out_dir) if args.out_dir else src.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = src.name[:-4] if src.name.endswith(".fsv") else src.name
    write_volume(pair.low, out_dir / f"{stem}.low.fsv")
    write_volume(pair.high, out_dir / f"{stem}.high.fsv")
    write_provenance(out_dir / f"{stem}.decompose.provenance.txt", "decompose", args)
    print(f"wrote {stem}.low.fsv and {stem}.high.fsv to {out_dir}")


def _train_config(args):
    mapping = parse_config_text(Path(args.config).read_text()) if args.config else {}
    for key in ("epochs", "seed", "crop", "sigma", "channels", "refine_k", "base_kind",
                "adv_weight", "lr"):
        value = getattr(args, key)
        if value is not None:
            mapping[key] = value
    if args.adversarial:
        mapping["adversarial"] = True
    config = TrainConfig.from_mapping(mapping)
    config.frequency = not args.baseline
    config.depth = args.depth
    config.checkpoint_every = args.checkpoint_every
    config.__post_init__()
    return config


def cmd_train(args):
    config = _train_config(args)
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    pairs = load_pairs(manifest)
    if not pairs:
        raise ArgumentError(f"manifest {manifest} lists no pairs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = build_and_train(pairs, config, checkpoint_dir=out / "checkpoints")
    save_checkpoint(result.model, out / "model.ckpt")
    write_loss_curve(result.curve, out / "loss.csv")
    if result.curve:
        plotting.plot_loss_curve(result.curve, out / "loss.png")
    (out / "train_config.txt").write_text(config.to_text())
    write_provenance(out / "provenance.txt", "train", args, {"config": config})
    last = result.curve[-1].loss_total if result.curve else float("nan")
    print(f"trained {config.epochs} epochs on {len(pairs)} pairs; final loss {last:.6f}")


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    mr = read_volume(args.mr)
    window = _triple(args.window)
    plan = plan_windows(mr.dims, window, _triple(args.stride) if args.stride else None)
    pred = predict_volume(model, normalize_mr(mr), plan)
    hu = HURange()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(denormalize_ct(pred.ct, hu), out)
    stem = str(out)[:-4] if out.name.endswith(".fsv") else str(out)
    if args.emit_bands:
        if pred.low is None:
            raise ArgumentError("--emit-bands needs a frequency-supervised checkpoint")
        # HU scale: ct = min_hu + width * (low + high)
        write_volume(pred.low.like(pred.low.data * hu.width + hu.min_hu), f"{stem}.low.fsv")
        write_volume(pred.high.like(pred.high.data * hu.width), f"{stem}.high.fsv")
    write_provenance(f"{stem}.provenance.txt", "infer", args,
                     {"windows": len(plan.origins)})
    print(f"wrote {out} ({len(plan.origins)} windows)")


def cmd_eval(args):
    pred = read_volume(args.pred)
    gt = read_volume(args.gt)
    bands = None
    if args.pred_low or args.pred_high:
        if not (args.pred_low and args.pred_high):
            raise ArgumentError("--pred-low and --pred-high must be given together")
        bands = (read_volume(args.pred_low), read_volume(args.pred_high))
    config = evaluation.EvalConfig(sigma=args.sigma, t_air=args.t_air, t_bone=args.t_bone)
    provenance = {"pred": args.pred, "gt": args.gt, "sigma": args.sigma,
                  "t_air": args.t_air, "t_bone": args.t_bone, "version": artifact_version()}
    report = evaluation.evaluate(pred, gt, config, bands, provenance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    _panel(pred, gt, config, out / "panel.png")
    write_provenance(out / "provenance.txt", "eval", args)
    print(report.to_text(), end="")


def _panel(pred, gt, config, path, index=None):
    index = gt.dims[0] // 2 if index is None else index
    err = evaluation.error_map(pred, gt).data
    panels = [
        ("ground truth", gt.data[index], "gray"),
        ("prediction", pred.data[index], "gray"),
        ("|error| (HU)", err[index], "magma"),
        ("segmentation (gt)", plotting.segmentation_rgb(
            evaluation.threshold_segment(gt.data[index], config.t_air, config.t_bone)), None),
        ("segmentation (pred)", plotting.segmentation_rgb(
            evaluation.threshold_segment(pred.data[index], config.t_air, config.t_bone)), None),
    ]
    plotting.plot_slice_panel(panels, path, title=f"axial slice {index}")


def cmd_param_count(args):
    print(param_count(args.arrangement, args.layers, args.channels, args.k))


def cmd_export_slices(args):
    out = Path(args.out)
    volume = read_volume(args.volume)
    written = export_slices(volume, out, "pred", axis=args.axis)
    if args.gt:
        gt = read_volume(args.gt)
        written += export_slices(gt, out, "gt", axis=args.axis)
        written += export_slices(evaluation.error_map(volume, gt), out, "error", axis=args.axis)
        if args.axis == 0:
            _panel(volume, gt, evaluation.EvalConfig(), out / "panel.png")
    write_provenance(out / "provenance.txt", "export-slices", args)
    print(f"wrote {len(written)} slices to {out}")


# ------------------------------------------------------------------ parser
def build_parser():
    parser = Parser(prog="freqsynth", description="Frequency-supervised 3D MR-to-CT synthesis")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="generate synthetic MR/CT pairs")
    p.add_argument("--dims", default="24,24,24")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-blobs", type=int, default=6)
    p.add_argument("--shell-contrast", type=float, default=1200.0)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("decompose", help="split a CT volume into low/high bands")
    p.add_argument("--input", required=True)
    p.add_argument("--sigma", type=float, default=15.0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train a synthesis model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--crop")
    p.add_argument("--sigma", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--refine-k", dest="refine_k", type=int)
    p.add_argument("--base-kind", dest="base_kind", choices=["UNET", "FCNET", "unet", "fcnet"])
    p.add_argument("--lr", type=float)
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--adv-weight", dest="adv_weight", type=float)
    p.add_argument("--baseline", action="store_true",
                   help="plain overall-L1 model without frequency supervision")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window whole-volume prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mr", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", default="16,16,16")
    p.add_argument("--stride")
    p.add_argument("--emit-bands", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics report for a prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--t-air", type=float, default=-200.0)
    p.add_argument("--t-bone", type=float, default=200.0)
    p.add_argument("--pred-low")
    p.add_argument("--pred-high")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("param-count", help="weight count of a context block")
    p.add_argument("--arrangement", required=True,
                   choices=["stack3d", "large_kernel", "factorized",
                            "STACK3D", "LARGE_KERNEL", "FACTORIZED_1D"])
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("export-slices", help="write axial PGM slices (and an error map)")
    p.add_argument("--volume", required=True)
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.add_argument("--axis", type=int, default=0, choices=[0, 1, 2])
    p.set_defaults(func=cmd_export_slices)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        args.func(args)
    except (FreqSynthError, OSError, ValueError) as exc:
        print(f"freqsynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
