"""Command line: ``focallens gen-data | train | eval | report``.

All commands share one directory layout under ``--out``::

    dataset.json manifest.jsonl images.bin vocab.txt   (gen-data)
    model.flck loss.tsv train.json                     (train)
    report.json                                        (eval)
    report.csv                                         (report)

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .config import RunConfig, load_config, parse_ks, parse_variant
from .data import COLORS, SHAPES, load_dataset, make_dataset, make_triplets, save_dataset
from .estimators import FocalLensEncoder
from .metrics import MetricReport, evaluate_colorshape, evaluate_continuous, evaluate_probe
from .training import TrainingDiverged

logger = logging.getLogger("focallens")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT_NAME = "model.flck"
REPORT_NAME = "report.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file; flags override it")
    p.add_argument("--seed", type=int, metavar="N", help="global seed (default 0)")
    p.add_argument("--out", metavar="DIR", help="run directory (default: current directory)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _data_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: --out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="focallens",
        description="Instruction-conditioned image embeddings on the ColorShape benchmark.",
        epilog="FOCAL_LENS_THREADS caps evaluation parallelism (default 1).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a ColorShape dataset", description="Render a ColorShape dataset into --out.")
    _common(g)
    g.add_argument("--n-per-combo", type=int, metavar="N", help="images per (color, shape) cell (default 50)")
    g.add_argument("--continuous", action="store_true", default=None, help="sample RGB colors instead of the four named colors")
    g.add_argument("--n-continuous", type=int, metavar="N", help="images in a continuous dataset (default 800)")
    g.add_argument("--conditions", metavar="LIST", help="comma-separated training conditions stored with the dataset")

    t = sub.add_parser("train", help="train a conditional encoder", description="Train a conditional encoder on a generated dataset.")
    _common(t)
    _data_flag(t)
    t.add_argument("--variant", choices=["clip", "mllm", "clip_style", "mllm_style"], help="encoder variant (default clip)")
    t.add_argument("--conditions", metavar="LIST", help="comma-separated conditions to train on (default: the dataset's)")
    t.add_argument("--batch-size", type=int, metavar="N", help="triplets per batch (default 64)")
    t.add_argument("--epochs", type=int, metavar="N", help="passes over the triplets (default 20)")
    t.add_argument("--lr", type=float, metavar="X", help="peak learning rate (default 1e-3)")

    e = sub.add_parser("eval", help="evaluate a checkpoint", description="Evaluate a checkpoint; writes report.json into --out.")
    _common(e)
    _data_flag(e)
    e.add_argument("--checkpoint", metavar="PATH", help=f"checkpoint file (default: --out/{CHECKPOINT_NAME})")
    e.add_argument("--conditions", metavar="LIST", help="retrieval conditions, e.g. color,shape,both")
    e.add_argument("--continuous", action="store_true", default=None, help="continuous-color rank correlation")
    e.add_argument("--probe", action="store_true", default=None, help="k-shot linear probe on (color, shape) labels")
    e.add_argument("--k", nargs="+", metavar="K", help="probe shots per class (default 5 10 15)")

    r = sub.add_parser("report", help="tabulate metric reports", description="Print a comparison table of reports; writes report.csv into --out if given.")
    r.add_argument("reports", nargs="+", metavar="REPORT", help="report.json files; two reports add a delta column")
    r.add_argument("--out", metavar="DIR", help="directory for report.csv")
    r.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _config(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "data": getattr(args, "data", None),
        "n_per_combo": getattr(args, "n_per_combo", None),
        "n_continuous": getattr(args, "n_continuous", None),
        "continuous": getattr(args, "continuous", None),
        "conditions": getattr(args, "conditions", None),
        "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "probe": getattr(args, "probe", None),
    }
    if getattr(args, "variant", None):
        overrides["variant"] = parse_variant(args.variant)
    if getattr(args, "k", None):
        overrides["k"] = parse_ks(" ".join(args.k))
    try:
        return load_config(args.config, **overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> int:
    ds = make_dataset(
        seed=cfg.seed,
        n_per_combo=cfg.n_per_combo,
        continuous=cfg.continuous,
        n_continuous=cfg.n_continuous,
    )
    if cfg.conditions:
        make_triplets(ds.specs[:1], cfg.conditions)  # validates against the dataset kind
        ds.conditions = cfg.conditions
    out = Path(cfg.out)
    save_dataset(ds, out)
    print(f"wrote {len(ds.specs)} images ({ds.kind}) to {out}")
    if ds.kind == "colorshape":
        cells = Counter((s.color, s.shape) for s in ds.specs)
        width = max(len(s) for s in SHAPES)
        print(" " * 8 + " ".join(f"{s:>{width}}" for s in SHAPES))
        for c in COLORS:
            print(f"{c:<8}" + " ".join(f"{cells[(c, s)]:>{width}}" for s in SHAPES))
    else:
        shapes = Counter(s.shape for s in ds.specs)
        print("  ".join(f"{s}={shapes[s]}" for s in SHAPES))
    print(f"conditions: {','.join(ds.conditions)}")
    return EXIT_OK


def _save_last_good(exc: TrainingDiverged, path: Path) -> None:
    tensors = {f"param/{k}": v for k, v in exc.params.items()}
    try:
        ckpt_io.save(ckpt_io.Checkpoint({"diverged_at_step": exc.step}, tensors), path)
    except CheckpointError as err:
        print(f"last-good parameters not saved: {err}", file=sys.stderr)
        return
    print(f"last-good parameters (before step {exc.step}): {path}", file=sys.stderr)


def cmd_train(cfg: RunConfig) -> int:
    ds = load_dataset(cfg.data_dir)
    if cfg.conditions:
        ds.conditions = cfg.conditions
    est = FocalLensEncoder(**cfg.estimator_params())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        est.fit(ds)
    except TrainingDiverged as exc:
        print(f"focallens train: error: {exc}", file=sys.stderr)
        _save_last_good(exc, out / "diverged.flck")
        return EXIT_RUNTIME
    report = est.report_
    extra = {"dataset": {"seed": ds.seed, "kind": ds.kind, "conditions": list(ds.conditions),
                         "images": len(ds.specs)}}
    est.save(out / CHECKPOINT_NAME, extra=extra)
    (out / "loss.tsv").write_text(report.loss_log())
    means = report.epoch_means()
    summary = {
        "steps": len(report.losses),
        "steps_per_epoch": report.steps_per_epoch,
        "first_step_loss": report.losses[0],
        "epoch_mean_loss": means,
        "final_temperature": report.temperatures[-1],
        "duplicate_targets": report.duplicate_targets,
        "elapsed_seconds": report.elapsed,
        "target_fingerprint_before": report.target_fingerprint_before,
        "target_fingerprint_after": report.target_fingerprint_after,
        "target_frozen": report.target_fingerprint_before == report.target_fingerprint_after,
    }
    (out / "train.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"trained {est.variant} for {len(report.losses)} steps in {report.elapsed:.1f}s")
    print(f"loss: first step {report.losses[0]:.4f}, first epoch {means[0]:.4f}, final epoch {means[-1]:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str]) -> int:
    ckpt_path = Path(checkpoint) if checkpoint else Path(cfg.out) / CHECKPOINT_NAME
    est = FocalLensEncoder.load(ckpt_path)
    ds = load_dataset(cfg.data_dir)
    continuous = cfg.continuous or (ds.kind == "continuous" and not cfg.conditions)
    if continuous and ds.kind != "continuous":
        raise UsageError("--continuous needs a dataset generated with --continuous")
    retrieval = cfg.conditions
    if retrieval is None and ds.kind == "colorshape":
        retrieval = ("color", "shape", "both")
    if retrieval:
        bad = [c for c in retrieval if c not in ("color", "shape", "both")]
        if bad:
            raise UsageError(f"{bad[0]!r} is not a retrieval condition")
        if ds.kind == "continuous" and set(retrieval) - {"shape"}:
            raise UsageError("a continuous dataset only supports the shape retrieval condition")
    if cfg.probe and ds.kind != "colorshape":
        raise UsageError("--probe needs a ColorShape dataset")

    if retrieval:
        report = evaluate_colorshape(est.embed, ds.specs, ds.images, retrieval)
    else:
        report = MetricReport(scores={"conditional": {}, "control": {}})
    report.seed = cfg.seed
    report.config = {
        "variant": est.variant,
        "estimator": est.get_params(),
        "dataset": {"seed": ds.seed, "kind": ds.kind, "images": len(ds.specs)},
        "conditions": list(retrieval or []),
        "continuous": bool(continuous),
        "probe_k": list(cfg.k) if cfg.probe else [],
        "steps": est.n_steps_,
    }
    if continuous:
        report.continuous = evaluate_continuous(est.embed, ds.specs, ds.images)
    if cfg.probe:
        report.probe = evaluate_probe(est.embed, ds.specs, ds.images, ks=cfg.k, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_NAME).write_text(report.to_json())

    for c in retrieval or []:
        print(f"mAP {c:<6} conditional {report.scores['conditional'][c]:.4f}  "
              f"control {report.scores['control'][c]:.4f}  scaled {report.scores['scaled'][c]:.4f}")
    if retrieval:
        print(f"mAP avg    conditional {report.averages['conditional']:.4f}  "
              f"control {report.averages['control']:.4f}")
    if continuous:
        cc = report.continuous
        print(f"spearman rho conditional {cc['conditional']:.4f}  control {cc['control']:.4f}")
    if cfg.probe:
        for i, k in enumerate(report.probe["k"]):
            print(f"probe k={k:<3} conditional {report.probe['conditional'][i]:.4f}  "
                  f"control {report.probe['control'][i]:.4f}")
    print(f"report: {out / REPORT_NAME}")
    return EXIT_OK


def flatten_report(report: MetricReport) -> dict[str, float]:
    """Metric name -> value, in a stable display order."""
    rows: dict[str, float] = {}
    for group in ("conditional", "control", "scaled"):
        for c, v in report.scores.get(group, {}).items():
            rows[f"map/{group}/{c}"] = v
        if group in report.averages:
            rows[f"map/{group}/average"] = report.averages[group]
    for group in ("conditional", "control"):
        if group in report.continuous:
            rows[f"rho/{group}"] = report.continuous[group]
    if report.probe:
        for group in ("conditional", "control"):
            for k, v in zip(report.probe["k"], report.probe[group]):
                rows[f"probe/{group}/k={k}"] = v
    return rows


def render_table(names: Sequence[str], flats: Sequence[dict]) -> tuple[str, list[list]]:
    """Aligned text table plus the same rows at full precision for CSV."""
    keys = list(dict.fromkeys(k for f in flats for k in f))
    header = ["metric", *names]
    if len(flats) == 2:
        header.append("delta")
    raw_rows, text_rows = [], []
    for key in keys:
        vals = [f.get(key) for f in flats]
        if len(flats) == 2:
            vals.append(None if None in vals else vals[1] - vals[0])
        raw_rows.append([key, *vals])
        cells = ["" if v is None else f"{v:.4f}" for v in vals]
        if len(flats) == 2 and cells[-1]:
            cells[-1] = f"{vals[-1]:+.4f}"
        text_rows.append([key, *cells])
    widths = [max(len(r[i]) for r in [header, *text_rows]) for i in range(len(header))]

    def fmt(row):
        return "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))

    lines = [fmt(header), "  ".join("-" * w for w in widths), *(fmt(r) for r in text_rows)]
    return "\n".join(lines), [header, *raw_rows]


def cmd_report(paths: Sequence[str], out: Optional[str]) -> int:
    reports = []
    for p in paths:
        try:
            reports.append(MetricReport.from_json(Path(p).read_text()))
        except ValueError as exc:
            raise ValueError(f"{p}: {exc}") from None
    names = [Path(p).parent.name or Path(p).stem for p in paths]
    if len(set(names)) != len(names):
        names = [f"{i}:{n}" for i, n in enumerate(names)]
    table, rows = render_table(names, [flatten_report(r) for r in reports])
    print(table)
    if out:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(rows[0])
        for row in rows[1:]:
            writer.writerow([row[0], *("" if v is None else repr(float(v)) for v in row[1:])])
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "report.csv").write_text(buf.getvalue())
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        # single-threaded BLAS keeps floating-point reductions identical across runs
        with threadpool_limits(limits=1):
            if args.command == "report":
                return cmd_report(args.reports, args.out)
            cfg = _config(args)
            if args.command == "gen-data":
                return cmd_gen_data(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            return cmd_eval(cfg, args.checkpoint)
    except UsageError as exc:
        print(f"focallens {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, CheckpointError, TrainingDiverged) as exc:
        print(f"focallens {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
