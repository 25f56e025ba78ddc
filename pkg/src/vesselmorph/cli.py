"""Command line entry point: ``vesselmorph <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import plotting, runs
from .btf import BtfParams, build_btf, render_btf
from .core import CHANNELS, FormatError, normalize, read_any_image, read_field, save_image, save_rgb, write_field
from .frangi import FrangiParams, multiscale_vesselness
from .phantoms import DOMAINS, generate_phantoms
from .pipeline import (
    TrainConfig,
    TrainingDiverged,
    coerce,
    evaluate,
    infer,
    parse_config_text,
    prepare,
    reference_config,
    train_stage1,
    train_stage2,
    train_stage3,
)
from .scalespace import ScaleGrid

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vesselmorph")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _add_image_input(p):
    p.add_argument("input", help="input image (PNG/PGM, or 1-channel .vmtf)")
    p.add_argument("--channel", choices=CHANNELS, default="green", help="plane used for RGB input")
    p.add_argument("--negate", action="store_true", help="invert intensities so vessels are bright")


def _add_grid(p):
    p.add_argument("--sigma-min", type=float, default=1.0, help="smallest scale (px)")
    p.add_argument("--sigma-max", type=float, default=5.0, help="largest scale (px)")
    p.add_argument("--sigma-step", type=float, default=0.5, help="scale grid step (px)")
    p.add_argument("--beta", type=float, default=0.5, help="Frangi blob sensitivity")
    p.add_argument("--c", type=float, default=0.5, help="Frangi structure sensitivity")


def build_parser():
    parser = _Parser(prog="vesselmorph", description=__doc__.splitlines()[0], formatter_class=_fmt)
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("vesselness", help="multiscale Frangi vesselness", formatter_class=_fmt)
    _add_image_input(p)
    _add_grid(p)
    p.add_argument("--out", required=True, help="2-channel VMTF output: vesselness, optimal scale")
    p.add_argument("--preview", help="optional 8-bit PNG of the vesselness map")

    p = sub.add_parser("btf", help="bipolar tensor field", formatter_class=_fmt)
    _add_image_input(p)
    _add_grid(p)
    p.add_argument("--epsilon", type=float, default=0.5, help="eigenvalue sensitivity")
    p.add_argument("--out", required=True, help="4-channel VMTF output")
    p.add_argument("--render", choices=("glyph", "hue"), help="also write a PNG rendering")
    p.add_argument("--render-out", help="rendering path (default: OUT with .png suffix)")
    p.add_argument("--spacing", type=int, default=8, help="glyph block size (px)")

    p = sub.add_parser("render", help="render a 4-channel VMTF field", formatter_class=_fmt)
    p.add_argument("field", help="4-channel VMTF file")
    p.add_argument("--mode", choices=("glyph", "hue"), default="hue", help="rendering style")
    p.add_argument("--spacing", type=int, default=8, help="glyph block size (px)")
    p.add_argument("--out", required=True, help="output PNG")

    p = sub.add_parser("synth", help="generate phantom datasets", formatter_class=_fmt)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, default=16, help="number of samples")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--domain", choices=sorted(DOMAINS), default="source", help="domain preset")
    p.add_argument("--size", type=int, default=64, help="image side (px)")

    p = sub.add_parser("train", help="run training stages", formatter_class=_fmt)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--seed", type=int, required=True, help="initialisation and shuffling seed")
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all", help="stage to run")
    p.add_argument("--preset", choices=("full", "reference"), default="full",
                   help="base settings: full-scale defaults or the desk-scale reference schedule")
    p.add_argument("--config", help="key = value file overriding the preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")
    p.add_argument("--no-figures", action="store_true", help="skip loss curve PNGs")

    p = sub.add_parser("infer", help="segment one image with a trained run", formatter_class=_fmt)
    _add_image_input(p)
    p.add_argument("--run", required=True, help="run directory with all three stages")
    p.add_argument("--out-prob", required=True, help="probability map PNG (8-bit)")
    p.add_argument("--out-mask", required=True, help="binary mask PNG")
    p.add_argument("--figure", help="optional panel figure: input, latents, probability, mask")

    p = sub.add_parser("eval", help="Dice evaluation of a trained run", formatter_class=_fmt)
    p.add_argument("--run", required=True, help="run directory with all three stages")
    p.add_argument("--data", required=True, action="append", help="dataset directory (repeatable)")
    p.add_argument("--out", help="CSV path (default: RUN/eval.csv)")
    p.add_argument("--no-figures", action="store_true", help="skip the Dice box plot")
    return parser


# --------------------------------------------------------------------------


def _grid(args):
    try:
        return ScaleGrid(args.sigma_min, args.sigma_max, args.sigma_step)
    except ValueError as exc:
        raise UsageError(f"invalid scale grid: {exc}") from exc


def _params(factory, *vals):
    try:
        return factory(*vals)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_input(args):
    return normalize(read_any_image(args.input, args.channel, args.negate))


def cmd_vesselness(args):
    grid = _grid(args)
    fp = _params(FrangiParams, args.beta, args.c)
    res = multiscale_vesselness(_load_input(args), grid, fp)
    write_field(np.stack([res.vesselness, res.sigma_star]), args.out)
    if args.preview:
        save_image(res.vesselness / max(res.vesselness.max(), 1e-12), args.preview)
    print(f"vesselness: max {res.vesselness.max():.4f} -> {args.out}")
    return EXIT_OK


def cmd_btf(args):
    grid = _grid(args)
    fp = _params(FrangiParams, args.beta, args.c)
    bp = _params(BtfParams, args.epsilon)
    field = build_btf(_load_input(args), grid, fp, bp)
    write_field(field, args.out)
    if args.render:
        dest = args.render_out or str(Path(args.out).with_suffix(".png"))
        save_rgb(render_btf(field, args.render, args.spacing), dest)
    print(f"btf: {field.shape[1]}x{field.shape[2]} -> {args.out}")
    return EXIT_OK


def cmd_render(args):
    field = read_field(args.field)
    if field.shape[0] != 4:
        raise UsageError(f"{args.field}: expected a 4-channel field, got {field.shape[0]}")
    save_rgb(render_btf(field, args.mode, args.spacing), args.out)
    return EXIT_OK


def cmd_synth(args):
    samples = generate_phantoms(args.count, DOMAINS[args.domain], args.seed, args.size)
    manifest = runs.write_dataset(samples, args.out)
    print(f"synth: {len(samples)} {args.domain} samples -> {manifest}")
    return EXIT_OK


def _train_config(args):
    run_cfg = Path(args.run) / "config.txt"
    if args.stage in ("2", "3") and run_cfg.exists():
        # later stages resume with the settings the earlier stages ran under
        base = runs.read_config(args.run)
    elif args.preset == "reference":
        base = reference_config(args.seed)
    else:
        base = TrainConfig(seed=args.seed)
    values = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in values:
            raise UsageError(f"--set: unknown key {key!r}")
        values[key] = coerce(key, value)
    values["seed"] = args.seed
    return TrainConfig(**values)


def cmd_train(args):
    try:
        config = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    first = stages[0]
    if first > 1:
        # fail before touching data if the earlier checkpoints are absent
        for s in range(1, first):
            path = runs.checkpoint_path(args.run, s)
            if not path.exists():
                raise FileNotFoundError(
                    f"stage {first} needs the stage {s} checkpoint, missing: {path}"
                )
    samples = runs.read_dataset(args.data)
    bundle = runs.load_bundle(args.run, first - 1, config)
    runs.write_config(args.run, config)
    data = prepare(samples, config)
    trainers = {1: train_stage1, 2: train_stage2, 3: train_stage3}
    for s in stages:
        result = trainers[s](data, bundle)
        runs.write_stage(args.run, s, bundle, result.history)
        if not args.no_figures:
            plotting.plot_loss_curve(result.history, Path(args.run) / f"stage{s}" / "loss.png", s)
        start, end = result.history[0][1], result.history[-1][1]
        print(f"stage {s}: loss {start:.6g} -> {end:.6g}")
    return EXIT_OK


def cmd_infer(args):
    bundle = runs.load_bundle(args.run, 3)
    x = _load_input(args)
    prob, mask = infer(x, bundle)
    save_image(prob, args.out_prob)
    save_image(mask.astype(np.float64), args.out_mask)
    if args.figure:
        from .toynet import forward

        cfg = bundle.config
        psi = build_btf(x, cfg.grid, cfg.frangi, cfg.btf)
        z_i = forward(bundle.intensity_encoder, x[None])[0][0]
        z_s = forward(bundle.structure_encoder, psi)[0][0]
        plotting.plot_panels(
            [x, render_btf(psi, "hue"), z_i, z_s, prob, mask],
            ["input", "tensor field (hue)", "intensity latent", "structure latent",
             "probability", "mask"],
            args.figure,
        )
    print(f"infer: {int(mask.sum())} vessel pixels -> {args.out_mask}")
    return EXIT_OK


def cmd_eval(args):
    bundle = runs.load_bundle(args.run, 3)
    samples = [s for d in args.data for s in runs.read_dataset(d)]
    report = evaluate(bundle, samples)
    out = Path(args.out) if args.out else Path(args.run) / "eval.csv"
    runs.write_eval(out, report)
    if not args.no_figures:
        plotting.plot_dice(report, out.with_suffix(".png"))
    s = report.summary()
    print(f"eval: n={s['n']} mean_dice={s['mean']:.6f} median={s['median']:.6f} min={s['min']:.6f}")
    for dom, st in sorted(report.by_domain().items()):
        print(f"  {dom}: n={st['n']} mean_dice={st['mean']:.6f}")
    return EXIT_OK


COMMANDS = {
    "vesselness": cmd_vesselness,
    "btf": cmd_btf,
    "render": cmd_render,
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("vesselmorph: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vesselmorph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"vesselmorph {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"vesselmorph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"vesselmorph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
