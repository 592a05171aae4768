"""Command-line entry point: ``orthoadapt <command> [--config PATH] [--seed N] [--out DIR]``.

Commands
    gen-data   write the clean source set, the corrupted target stream and its manifest
    pretrain   train the source segmentation model on the generated source set
    adapt      continual adaptation over the stream; cell and aggregate CSVs
    eval       frozen evaluation of a checkpoint over the stream
    merge      fold adapters into the base weights and check equivalence
    sweep      rank / grid / lambda / order / ablation comparison table
    toy        angle vs magnitude reconstruction experiment

Every command writes ``config.resolved.ini`` into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, config as configmod
from .adapters import adapted_layers, merge_model
from .data import (
    DomainStream,
    build_stream,
    cyclic_orders,
    load_sample,
    materialize,
    save_sample,
    source_set,
)
from .engine import (
    ABLATION_LADDER,
    EngineConfig,
    TeacherStudentEngine,
    ablation_matrix,
    ladder_config,
    run_stream,
)
from .errors import ConfigurationError, OrthoAdaptError, UsageError
from .metrics import pct, report
from .models import SegNet
from .toy import run_toy
from .training import evaluate, pretrain_source, train_segnet

log = logging.getLogger("orthoadapt")

MANIFEST = "manifest.csv"
SOURCE_MANIFEST = "source.csv"
SWEEP_AXES = {
    "rank": (4, 8, 16, 32, 64),
    "grid": (8, 16, 32, 64),
    "lambda": (0.1, 0.5, 1.0, 2.0),
    "order": None,
    "ablation": None,
}


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(cfg: configmod.RunConfig, out: Path) -> dict:
    d, seed = cfg.data, cfg.seed
    rows = []
    for split, n in (("train", cfg.pretrain.num_train), ("heldout", cfg.pretrain.num_heldout)):
        folder = out / "source" / split
        folder.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(source_set(seed, n, d.height, d.width, d.classes, split)):
            img, lab = f"source/{split}/{i:04d}.ppm", f"source/{split}/{i:04d}.pgm"
            save_sample(out / img, out / lab, s)
            rows.append((split, img, lab))
    write_csv(out / SOURCE_MANIFEST, ("split", "image_path", "label_path"), rows)

    stream = build_stream(d.domain_specs(), d.samples_per_domain, d.rounds, seed)
    (out / "stream").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(stream):
        stem = f"stream/{i:05d}_r{e.round}_{e.domain}"
        save_sample(out / f"{stem}.ppm", out / f"{stem}.pgm",
                    materialize(e, d.height, d.width, d.classes))
        entries.append(replace(e, image_path=f"{stem}.ppm", label_path=f"{stem}.pgm"))
    DomainStream(entries, stream.rounds).save(out / MANIFEST)
    return {"source_files": 2 * len(rows), "stream_files": 2 * len(entries)}


def load_source(data_dir: Path):
    path = data_dir / SOURCE_MANIFEST
    if not path.is_file():
        raise ConfigurationError(f"no source dataset at {path}; run gen-data first")
    splits = {"train": [], "heldout": []}
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            splits[row["split"]].append(load_sample(data_dir / row["image_path"],
                                                    data_dir / row["label_path"]))
    return splits["train"], splits["heldout"]


def load_stream(data_dir: Path) -> DomainStream:
    path = data_dir / MANIFEST
    if not path.is_file():
        raise ConfigurationError(f"no stream manifest at {path}; run gen-data first")
    return DomainStream.load(path)


# ------------------------------------------------------------------ pretrain


def cmd_pretrain(cfg: configmod.RunConfig, out: Path, data_dir: Path) -> dict:
    train, heldout = load_source(data_dir)
    model = train_segnet(train, cfg.data.classes, cfg.pretrain, cfg.seed)
    clean = evaluate(model, heldout).miou()
    checkpoint.save(out / "source.ckpt", model)
    write_csv(out / "pretrain.csv", ("metric", "value"),
              [("heldout_clean_miou", pct(clean, 2)), ("train_samples", len(train))])
    return {"clean_miou": clean}


# ------------------------------------------------------------------ adapt / eval


def _disk_loader(data_dir: Path):
    return lambda e: materialize(e, base_dir=data_dir)


def _write_report(out: Path, run, baseline=None) -> None:
    table = report(run, baseline)
    (out / "cells.csv").write_text(table.cells_csv(), encoding="utf-8")
    (out / "aggregates.csv").write_text(table.aggregates_csv(), encoding="utf-8")


def _frozen_engine(source: SegNet, seed: int) -> TeacherStudentEngine:
    return TeacherStudentEngine(source, EngineConfig(use_adapters=False, use_orth=False,
                                                     mask=None, seed=seed))


def cmd_adapt(cfg: configmod.RunConfig, out: Path, data_dir: Path, ckpt: Path) -> dict:
    source, _ = checkpoint.load(ckpt)
    if adapted_layers(source):
        raise UsageError(f"{ckpt} already carries adapters; adapt expects a source checkpoint")
    stream = load_stream(data_dir)
    loader = _disk_loader(data_dir)
    baseline = run_stream(_frozen_engine(source, cfg.seed), stream, loader, "source")
    engine = TeacherStudentEngine(source, cfg.engine_config())
    run = baseline if not engine.trainable else run_stream(engine, stream, loader, "adapted")
    _write_report(out, run, baseline)
    checkpoint.save(out / "adapted.ckpt", engine.teacher)
    return {"mean_miou": run.mean_miou(), "source_miou": baseline.mean_miou()}


def cmd_eval(cfg: configmod.RunConfig, out: Path, data_dir: Path, ckpt: Path) -> dict:
    model, _ = checkpoint.load(ckpt)
    model.freeze()
    run = run_stream(_frozen_engine(model, cfg.seed), load_stream(data_dir), _disk_loader(data_dir),
                     "eval")
    _write_report(out, run)
    return {"mean_miou": run.mean_miou()}


# ------------------------------------------------------------------ merge


def cmd_merge(cfg: configmod.RunConfig, out: Path, ckpt: Path) -> dict:
    model, _ = checkpoint.load(ckpt)
    if not adapted_layers(model):
        raise UsageError(f"{ckpt} has no adapters to merge")
    adapter_count = sum(m.adapter.A.size + m.adapter.B.size for _, m in adapted_layers(model))
    expected = model.num_parameters() - adapter_count
    gen = np.random.default_rng(cfg.seed)
    inputs = gen.random((100, model.in_ch, cfg.data.height, cfg.data.width))
    with ad.no_grad():
        before = [model(x).data for x in inputs]
    merge_model(model)
    with ad.no_grad():
        dev = max(float(np.abs(model(x).data - b).max()) for x, b in zip(inputs, before))
    checkpoint.save(out / "merged.ckpt", model)
    write_csv(out / "merge.csv", ("metric", "value"), [
        ("max_abs_deviation", f"{dev:.3e}"),
        ("merged_parameters", model.num_parameters()),
        ("source_parameters", expected),
    ])
    if model.num_parameters() != expected:
        raise UsageError("merged parameter count differs from the source model")
    return {"max_dev": dev, "params": model.num_parameters()}


# ------------------------------------------------------------------ sweep


def _sweep_source(cfg: configmod.RunConfig, ckpt: Path | None) -> SegNet:
    if ckpt is not None:
        model, _ = checkpoint.load(ckpt)
        return model
    d = cfg.data
    model, clean = pretrain_source(cfg.seed, cfg.pretrain, d.height, d.width, d.classes)
    log.info("pretrained source in memory: held-out clean mIoU %.4f", clean)
    return model


def cmd_sweep(cfg: configmod.RunConfig, out: Path, axis: str, ckpt: Path | None = None,
              data_dir: Path | None = None) -> list[tuple]:
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    d = cfg.data
    source = _sweep_source(cfg, ckpt)
    if data_dir is not None:
        stream, loader = load_stream(data_dir), _disk_loader(data_dir)
    else:
        stream = build_stream(d.domain_specs(), d.samples_per_domain, d.rounds, cfg.seed)
        loader = lambda e: materialize(e, d.height, d.width, d.classes)  # noqa: E731

    settings: list[tuple[str, configmod.RunConfig, DomainStream]] = []
    if axis == "rank":
        settings = [(str(v), replace(cfg, adapt=replace(cfg.adapt, rank=v)), stream)
                    for v in SWEEP_AXES["rank"]]
    elif axis == "grid":
        settings = [(str(v), replace(cfg, adapt=replace(cfg.adapt, grid=v)), stream)
                    for v in SWEEP_AXES["grid"]]
    elif axis == "lambda":
        settings = [(repr(v), replace(cfg, adapt=replace(cfg.adapt, lam=v)), stream)
                    for v in SWEEP_AXES["lambda"]]
    elif axis == "order":
        if data_dir is not None:
            raise UsageError("the order sweep rebuilds the stream; omit --data")
        for order in cyclic_orders(d.domain_specs()):
            label = "-".join(s.name for s in order)
            settings.append((label, cfg, build_stream(order, d.samples_per_domain, d.rounds, cfg.seed)))

    rows = []
    if axis == "ablation":
        base = cfg.engine_config()
        reports = ablation_matrix(source, stream, base, loader=loader)
        toggles = dict(ABLATION_LADDER)
        for name, run in reports.items():
            (out / axis / name).mkdir(parents=True, exist_ok=True)
            (out / axis / name / "engine.txt").write_text(
                repr(ladder_config(base, **toggles[name])) + "\n", encoding="utf-8")
            rows.append((axis, name, "ok", pct(run.mean_miou(), 2), pct(run.mean_macc(), 2),
                         run.samples))
    else:
        for label, row_cfg, row_stream in settings:
            row_cfg.echo(out / axis / label)
            try:
                engine = TeacherStudentEngine(source, row_cfg.engine_config())
            except ConfigurationError as exc:
                rows.append((axis, label, f"infeasible: {exc}", "", "", 0))
                continue
            run = run_stream(engine, row_stream, loader, label)
            rows.append((axis, label, "ok", pct(run.mean_miou(), 2), pct(run.mean_macc(), 2),
                         run.samples))
            log.info("sweep %s=%s mean mIoU %.4f", axis, label, run.mean_miou())
    write_csv(out / f"sweep_{axis}.csv", ("axis", "value", "status", "mean_miou", "mean_macc",
                                          "samples"), rows)
    return rows


# ------------------------------------------------------------------ toy


def cmd_toy(cfg: configmod.RunConfig, out: Path) -> dict:
    result, history = run_toy(cfg.seed, cfg.toy, out)
    write_csv(out / "toy_history.csv", ("epoch", "train_mse"),
              [(i + 1, f"{v:.10g}") for i, v in enumerate(history)])
    return {"mse_inner": result.mse_inner, "mse_magnitude": result.mse_magnitude,
            "mse_angle": result.mse_angle}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--preset", choices=configmod.PRESETS,
                        help="adaptation learning-rate preset")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="orthoadapt", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate source set and target stream")
    p = sub.add_parser("pretrain", parents=[common], help="train the source model")
    p.add_argument("--data", type=Path, required=True, help="gen-data output directory")
    for name, helptext in (("adapt", "continual test-time adaptation"),
                           ("eval", "frozen evaluation of a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--checkpoint", type=Path, required=True)
    p = sub.add_parser("merge", parents=[common], help="merge adapters into base weights")
    p.add_argument("--checkpoint", type=Path, required=True)
    p = sub.add_parser("sweep", parents=[common], help="one-axis comparison table")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--checkpoint", type=Path, help="source checkpoint (default: pretrain in memory)")
    p.add_argument("--data", type=Path, help="gen-data directory (default: generate in memory)")
    sub.add_parser("toy", parents=[common], help="angle vs magnitude reconstruction")
    return parser


def run(args: argparse.Namespace) -> dict | list:
    cfg = configmod.load(args.config).with_overrides(args.seed, args.preset)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    cmd = args.command
    if cmd == "gen-data":
        return cmd_gen_data(cfg, out)
    if cmd == "pretrain":
        return cmd_pretrain(cfg, out, args.data)
    if cmd == "adapt":
        return cmd_adapt(cfg, out, args.data, args.checkpoint)
    if cmd == "eval":
        return cmd_eval(cfg, out, args.data, args.checkpoint)
    if cmd == "merge":
        return cmd_merge(cfg, out, args.checkpoint)
    if cmd == "sweep":
        return cmd_sweep(cfg, out, args.axis, args.checkpoint, args.data)
    return cmd_toy(cfg, out)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (OrthoAdaptError, OSError) as exc:
        print(f"orthoadapt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if isinstance(summary, dict):
        for k, v in summary.items():
            print(f"{k}: {v}")
    else:
        for row in summary:
            print(",".join(str(c) for c in row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
