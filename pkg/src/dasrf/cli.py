"""Command-line entry point: ``dasrf <subcommand> [options]``.

Exit codes: 0 success, 2 configuration/format error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from dasrf import rf
from dasrf.ablation import run_ablation
from dasrf.backbones import BackboneSpec, build, receptive_layers
from dasrf.cell import Genotype, build_cell, to_dot
from dasrf.config import RunConfig
from dasrf.data import DatasetSpec, generate
from dasrf.errors import ConfigurationError, ContractError, FormatError, NumericError
from dasrf.imageio import write_ppm
from dasrf.search import ARMS, search, train_final
from dasrf.tensor.core import set_precision


def _global_flags(parser, suppress: bool):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="run config JSON")
    parser.add_argument("--seed", type=int, default=default(None), help="seed for every random stream")
    parser.add_argument("--out", default=default(None), help="output directory")
    parser.add_argument("--precision", choices=("f32", "f64"), default=default("f32"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasrf", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="bilevel search for a genotype")
    p.add_argument("--log-wall-clock", action="store_true", help="fill the seconds column of metrics.csv")

    p = sub.add_parser("train", parents=[common], help="train a backbone with a fixed genotype")
    p.add_argument("--genotype", required=True)

    p = sub.add_parser("rf", parents=[common], help="receptive-field analysis")
    p.add_argument("--layers", help="comma list such as k3s1,k3s2,k3s1d2")
    p.add_argument("--backbone", help="backbone spec JSON; reports its per-layer RF")
    p.add_argument("--fused", help="translate:tx,ty | rotate:deg | scale:gamma")
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--pivot", default=None, help="rotation pivot x,y")
    p.add_argument("--mc", type=int, default=0, help="Monte-Carlo samples for a cross-check")
    p.add_argument("--erf", action="store_true", help="empirical RF of the backbone's centre unit")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--batch", type=int, default=32)

    p = sub.add_parser("ablate", parents=[common], help="run ablation arms over seeds")
    p.add_argument("--arm", default="all", help=f"one of {', '.join(ARMS)} or 'all'")
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("export-genotype", parents=[common], help="render a genotype as DOT")
    p.add_argument("--genotype", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--dataset", help="dataset spec JSON (defaults to the run config's)")
    p.add_argument("--previews", type=int, default=4)
    return parser


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = run.with_seed(args.seed)
    return run


def _out_dir(args, run: RunConfig | None = None) -> Path:
    out = Path(args.out or (run.out if run else "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_genotype(path) -> Genotype:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"genotype file not found: {path}")
    try:
        return Genotype.from_json(path.read_text())
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"{path}: not a genotype file ({exc})") from exc


def cmd_search(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, run)
    cfg = run.search
    cfg.checkpoint_dir = str(out / "checkpoint")
    splits = generate(run.dataset)
    cell = build_cell(run.topology)
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 17]).spawn(1)[0])
    genotype, report = search(cell, build(run.backbone, rng), splits["train"], cfg)
    (out / "genotype.json").write_text(genotype.to_json())
    (out / "cell.dot").write_text(to_dot(cell, genotype))
    report.write_csv(out / "metrics.csv", include_seconds=args.log_wall_clock or cfg.log_wall_clock)
    (out / "trajectory.json").write_text(json.dumps(report.trajectory) + "\n")
    print(out / "genotype.json")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, run)
    genotype = _load_genotype(args.genotype)
    splits = generate(run.dataset)
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 17]).spawn(2)[1])
    report = train_final(genotype, build(run.backbone, rng), splits["train"], splits["test"], run.train,
                         run.search_space)
    report.write_csv(out / "metrics.csv")
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    print(f"{report.final_metric:.4f}")
    return 0


def _parse_fused(text: str) -> tuple[str, list[float]]:
    kind, _, params = text.partition(":")
    if not params:
        raise ConfigurationError(f"--fused needs kind:params, got {text!r}")
    try:
        return kind, [float(v) for v in params.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"bad --fused parameters {params!r}") from exc


def cmd_rf(args) -> int:
    report = rf.RFReport()
    printed = False
    if args.layers:
        layers = rf.parse_layers(args.layers)
        report.per_layer = rf.theoretical_rf_per_layer(layers)
        print(rf.theoretical_rf(layers))
        printed = True
    spec = BackboneSpec.load(args.backbone) if args.backbone else None
    if spec is not None:
        report.per_layer = rf.theoretical_rf_per_layer(receptive_layers(spec))
        if not args.layers:
            print(rf.theoretical_rf(receptive_layers(spec)))
            printed = True
    if args.fused:
        kind, params = _parse_fused(args.fused)
        pivot = tuple(float(v) for v in args.pivot.split(",")) if args.pivot else rf.ROTATION_PIVOT
        area = rf.fused_rf_area(kind, params, args.r, args.frames, pivot)
        report.fused = {"kind": kind, "params": params, "r": args.r, "frames": args.frames, "area": area}
        if args.mc:
            est, err = rf.monte_carlo_union_area(rf.frame_regions(kind, params, args.r, args.frames, pivot),
                                                 args.mc, args.seed or 0)
            report.fused["monte_carlo"] = {"area": est, "stderr": err, "samples": args.mc}
        print(area)
        printed = True
    if args.erf:
        out = _out_dir(args)
        spec = spec or BackboneSpec(num_classes=2, head="dense_predictor")
        if spec.head != "dense_predictor":
            spec = BackboneSpec.from_dict({**spec.to_dict(), "head": "dense_predictor"})
        model = build(spec, args.seed or 0).eval()
        centre = (0, args.size // 2, args.size // 2)
        heat = rf.empirical_rf(lambda x: model(x), (spec.in_channels, args.size, args.size), centre,
                               args.batch, args.seed or 0)
        rf.save_heatmap(out / "erf.pgm", heat)
        report.erf = {"file": "erf.pgm", "extent_box": list(rf.extent_box(heat, centre[1:]))}
    if args.out or args.erf:
        report.save(_out_dir(args) / "rf_report.json")
    if not printed and not args.erf:
        raise ConfigurationError("rf needs at least one of --layers, --backbone, --fused, --erf")
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, run)
    arms = ARMS if args.arm == "all" else tuple(a.strip() for a in args.arm.split(","))
    for a in arms:
        if a not in ARMS:
            raise ConfigurationError(f"unknown ablation arm {a!r}; known: {ARMS}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seed is None else [args.seed]
    results = run_ablation(run, arms, seeds)
    summary = {arm: {"per_seed": vals, "mean": float(np.mean(vals))} for arm, vals in results.items()}
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for arm, s in summary.items():
        print(f"{arm:16s} {s['mean']:.4f}")
    return 0


def cmd_export(args) -> int:
    genotype = _load_genotype(args.genotype)
    dot = to_dot(genotype.to_cell(), genotype)
    if args.out:
        path = _out_dir(args) / "genotype.dot"
        path.write_text(dot)
        print(path)
    else:
        sys.stdout.write(dot)
    return 0


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    spec = DatasetSpec.load(args.dataset) if args.dataset else run.dataset
    if args.seed is not None:
        spec.seed = args.seed
    out = _out_dir(args, run)
    for name, ds in generate(spec).items():
        np.savez(out / f"{name}.npz", images=ds.images, labels=ds.labels)
        for i in range(min(args.previews, len(ds))):
            write_ppm(out / f"{name}_{i:03}.ppm", ds.images[i])
    (out / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


COMMANDS = {"search": cmd_search, "train": cmd_train, "rf": cmd_rf, "ablate": cmd_ablate,
            "export-genotype": cmd_export, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_precision(args.precision)
        return COMMANDS[args.command](args)
    except NumericError as exc:
        where = f" (last good checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return 3
    except (ConfigurationError, FormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        set_precision("f32")


if __name__ == "__main__":
    sys.exit(main())
