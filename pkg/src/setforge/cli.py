"""Command-line interface.

Subcommands: train, eval, extrapolate, verify, plot. Exit codes: 0 on
success, 1 when a property suite or training-time check fails, 2 on usage
errors (bad flags, missing files, invalid config keys or preconditions).

Config files are flat ``key = value`` text under bracketed sections; every
section is read and merged in file order. ``--key=value`` arguments override
file values, so ``setforge train --config a.ini --epochs=1`` trains for one
epoch regardless of what a.ini says.
"""

from __future__ import annotations

import argparse
import configparser
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import harness
from . import verify as verify_mod
from .diffcore import NonFiniteError, make_rng
from .harness import ExperimentConfig
from .svg import ImagePanel, PlotSpec, PointPanel, emit_svg, training_curve_svg

OK, FAILURE, USAGE = 0, 1, 2

_OVERRIDE = re.compile(r"^--([A-Za-z0-9][A-Za-z0-9_-]*)=(.*)$")


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if not re.search(r"^\s*\[", text, flags=re.M):
        text = "[experiment]\n" + text
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    merged = {}
    for section in parser.sections():
        merged.update(dict(parser.items(section)))
    return merged


def parse_overrides(extra: list) -> dict:
    out = {}
    for token in extra:
        m = _OVERRIDE.match(token)
        if m is None:
            raise UsageError(f"unrecognised argument: {token} "
                             "(overrides look like --key=value)")
        out[m.group(1)] = m.group(2)
    return out


def build_config(args, extra: list) -> ExperimentConfig:
    mapping = {}
    if args.config:
        mapping.update(read_config_file(args.config))
    mapping.update(parse_overrides(extra))
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = args.seed
    if getattr(args, "data_seed", None) is not None:
        mapping["data_seed"] = args.data_seed
    if getattr(args, "out", None):
        mapping["out_dir"] = args.out
    try:
        return ExperimentConfig.from_mapping(mapping).validate()
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_run(run_dir) -> tuple:
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").is_file():
        raise UsageError(f"no run found at {run_dir} (missing config.json)")
    return harness.load_run(run_dir)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, extra: list) -> int:
    config = build_config(args, extra)
    summary = harness.train(config, quiet=args.quiet)
    t = summary["test"]
    print(f"done: chamfer {t['chamfer']:.6g} size_rmse {t['size_rmse']:.4g} "
          f"({summary['wall_seconds']}s, artifacts in {config.out_dir})")
    return OK


def cmd_eval(args, extra: list) -> int:
    if args.run:
        bundle, config = _load_run(args.run)
        overrides = parse_overrides(extra)
        if overrides:
            merged = {**json.loads(
                (Path(args.run) / "config.json").read_text()), **overrides}
            try:
                config = ExperimentConfig.from_mapping(merged).validate()
            except (KeyError, ValueError) as exc:
                raise UsageError(str(exc)) from exc
            bundle = harness.load_checkpoint(Path(args.run) / "model.ckpt",
                                             config)
    else:
        config = build_config(args, extra)
        run_dir = Path(config.out_dir)
        if not (run_dir / "model.ckpt").is_file():
            raise UsageError(f"no checkpoint at {run_dir}/model.ckpt; "
                             "train first or pass --run")
        bundle = harness.load_checkpoint(run_dir / "model.ckpt", config)
    if args.use_gt_size:
        bundle.config.use_gt_size = True
    config = bundle.config
    _, test_ds = harness.load_task_datasets(config)
    metrics = harness.evaluate(bundle, test_ds, limit=args.limit)
    for name, value in metrics.items():
        print(f"{name} {value:.6g}")
    out_dir = Path(args.run) if args.run else Path(config.out_dir)
    with open(out_dir / "eval.json", "w") as f:
        json.dump(metrics, f, indent=1)
    return OK


def cmd_extrapolate(args, extra: list) -> int:
    if extra:
        raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
    bundle, config = _load_run(args.run)
    if config.model not in ("tspn", "cdspn"):
        raise UsageError("extrapolate needs a tspn or cdspn run "
                         f"(this run is {config.model})")
    if config.task != "set-mnist":
        raise UsageError("extrapolate renders 2-d point sets; "
                         f"this run's task is {config.task}")
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"bad --sizes value: {args.sizes}") from exc
    if not sizes:
        raise UsageError("--sizes must name at least one target size")
    for s in sizes:
        if not 1 <= s <= args.size_cap:
            raise UsageError(
                f"requested size {s} exceeds the cap {args.size_cap}")

    _, test_ds = harness.load_task_datasets(config)
    report, panels = harness.extrapolate_report(
        bundle, test_ds, sizes, args.count, size_cap=args.size_cap,
        collect_points=True)

    rows = []
    for s in sizes:
        row = []
        for i in range(report["count"]):
            pts = panels[i][s]
            if pts is None:
                row.append(PointPanel(np.zeros((0, 2)),
                                      caption=f"{s} (out of range)"))
            else:
                row.append(PointPanel(np.clip(pts, 0.0, 1.0), caption=str(s)))
        rows.append(row)
    rows.append([PointPanel(panels[i]["true"],
                            caption=f"input {report['entries'][i]['true_size']}",
                            colour="#444444")
                 for i in range(report["count"])])

    out = Path(args.out) if args.out else Path(args.run) / "extrapolate.svg"
    emit_svg(PlotSpec(rows=rows, title=f"{config.model} generations by size"),
             out)
    sidecar = out.with_suffix(".json")
    with open(sidecar, "w") as f:
        json.dump(report, f, indent=1)
    print(f"wrote {out} and {sidecar}")
    return OK


def cmd_verify(args, extra: list) -> int:
    if extra:
        raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
    names = args.suites or list(verify_mod.SUITES)
    for name in names:
        if name not in verify_mod.SUITES:
            raise UsageError(f"unknown suite {name!r}; choose from "
                             f"{', '.join(verify_mod.SUITES)}")
    if args.corrupt:
        verify_mod.corrupt_solver()
    results = verify_mod.run_suites(names, quick=args.quick)
    width = max(len(r[0]) for r in results)
    failures = 0
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        failures += not passed
        print(f"{name:<{width}}  {status}  {detail}")
    print(f"{len(results) - failures}/{len(results)} properties passed")
    return OK if failures == 0 else FAILURE


def cmd_plot(args, extra: list) -> int:
    if extra:
        raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
    bundle, config = _load_run(args.run)
    kind = args.kind
    if kind == "auto":
        kind = "boxes" if config.task == "detection" else "recon"
    out = Path(args.out) if args.out else Path(args.run) / f"{kind}.svg"

    if kind == "curve":
        epochs, values = [], []
        metrics = Path(args.run) / "metrics.csv"
        if not metrics.is_file():
            raise UsageError(f"no metrics.csv in {args.run}")
        for line in metrics.read_text().splitlines()[1:]:
            epoch, split, metric, value = line.split(",")
            if split == "train" and metric == "loss":
                epochs.append(int(epoch))
                values.append(float(value))
        training_curve_svg(epochs, values, "train loss", out)
        print(f"wrote {out}")
        return OK

    _, test_ds = harness.load_task_datasets(config)
    count = min(args.count, len(test_ds))
    subset = data_mod.subset(test_ds, count)
    pad_to = bundle.n_max if config.model == "dspn" else None
    batch = next(data_mod.make_batches(subset, count, pad_to=pad_to))
    pred = bundle.predict(batch, make_rng(config.data_seed, 101, 0))
    pres = pred.presence.values
    if config.model == "dspn":
        keep = pres > config.presence_threshold
    else:
        keep = pres > 0

    if kind == "recon":
        if config.task != "set-mnist":
            raise UsageError("recon plots need a set-mnist run")
        top, bottom = [], []
        for i in range(count):
            pts = np.clip(pred.points.values[i][keep[i]], 0.0, 1.0)
            top.append(PointPanel(pts, caption=str(int(keep[i].sum()))))
            truth = batch.points[i, :batch.sizes[i]]
            bottom.append(PointPanel(truth, caption=str(int(batch.sizes[i])),
                                     colour="#444444"))
        emit_svg(PlotSpec(rows=[top, bottom],
                          title=f"{config.model} reconstructions"), out)
    elif kind == "boxes":
        if config.task != "detection":
            raise UsageError("box plots need a detection run")
        row = []
        for i in range(count):
            image = (batch.images[i] * 255).astype(np.uint8)
            boxes = [b for b in batch.points[i, :batch.sizes[i]]]
            colours = ["#2e9e4f"] * len(boxes)
            pred_boxes = [b for b in pred.points.values[i][keep[i]]]
            boxes += pred_boxes
            colours += ["#d4483b"] * len(pred_boxes)
            row.append(ImagePanel(image, boxes=boxes, box_colours=colours,
                                  caption=f"{len(pred_boxes)} pred / "
                                          f"{int(batch.sizes[i])} true"))
        emit_svg(PlotSpec(rows=[row], panel_size=140,
                          title=f"{config.model} detections"), out)
    else:
        raise UsageError(f"unknown plot kind {kind!r}")
    print(f"wrote {out}")
    return OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setforge",
        description="conditional set generation: training, evaluation, "
                    "property verification, and figure rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--seed", type=int, help="model init seed")
    p.add_argument("--data-seed", type=int, dest="data_seed",
                   help="shuffle/sampling seed")
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on the test split")
    p.add_argument("--run", help="run directory with config.json + model.ckpt")
    p.add_argument("--config", help="config file naming the run via out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--out")
    p.add_argument("--use-gt-size", action="store_true",
                   help="ablation: use ground-truth sizes instead of the head")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extrapolate",
                       help="decode at requested sizes and render a grid")
    p.add_argument("--run", required=True)
    p.add_argument("--sizes", required=True,
                   help="comma-separated target sizes, e.g. 100,342,1000")
    p.add_argument("--count", type=int, default=8,
                   help="number of test inputs to render")
    p.add_argument("--size-cap", type=int, default=1000, dest="size_cap")
    p.add_argument("--out", help="output SVG path")
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("suites", nargs="*",
                   help=f"subset of: {', '.join(verify_mod.SUITES)}")
    p.add_argument("--quick", action="store_true",
                   help="fewer random configurations per property")
    p.add_argument("--corrupt", action="store_true",
                   help=argparse.SUPPRESS)   # test hook: break the solver
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="render SVG figures from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--kind", default="auto",
                   choices=("auto", "recon", "boxes", "curve"))
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return USAGE
    except (NonFiniteError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
