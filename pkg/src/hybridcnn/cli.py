"""Command-line entry point.

Subcommands: prepare, inspect, train, eval, predict, pca. Every command
writes a resolved-config snapshot next to its outputs, uses exit code 0 on
success, 1 for validation/configuration problems, 2 for runtime failures,
and prints machine-parsable failures as lines starting with ``error:``.
Verbosity comes from the HCNN_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import PRESETS, resolve_pipeline
from .data import (apply_plan, class_counts, decode_and_resize, default_plan,
                   generate_synthetic, load_manifest, plan_from_dict, save_manifest,
                   scan_directory, split)
from .errors import (CheckpointError, ConfigurationError, DataError, HybridCnnError,
                     NumericsError)
from .evaluation import evaluate_model, extract_features, pca2
from .fusion import HybridModel
from .ops import softmax
from .tensor import Tensor
from .training import EpochStats, train_branches, train_hybrid

log = logging.getLogger("hybridcnn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridcnn",
                     description="Train, inspect, and evaluate the fused dual-branch CNN classifier.")
    parser.add_argument("--version", action="version", version=f"hybridcnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    presets = ", ".join(sorted(PRESETS))

    p = sub.add_parser("prepare", help="build dataset manifests (scan, synthesize, augment, split)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir", help="class-per-subdirectory image tree to scan")
    src.add_argument("--manifest", help="existing JSONL manifest to start from")
    src.add_argument("--synthetic", action="store_true",
                     help="generate the built-in four-pattern synthetic dataset")
    p.add_argument("--images-per-class", type=int, default=200)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--augment", default="none",
                   help="'none', 'default' (the shipped preset), or a plan JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("inspect", help="print the architecture table and parameter totals")
    p.add_argument("--config", default="canonical", help=f"preset ({presets}) or config JSON path")
    p.add_argument("--expect-trainable", type=int, default=None,
                   help="fail (exit 1) unless the trainable total equals this")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="two-phase training: branches, then the fused model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default="compact", help=f"preset ({presets}) or config JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--branch-epochs", type=int, default=None,
                   help="phase-1 epochs (defaults to --epochs)")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--tau", type=float, default=None, help="fusion similarity threshold override")
    p.add_argument("--fine-tune-branches", action="store_true",
                   help="update branch weights in phase 2 instead of freezing them")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "validation", "all"])
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--custom-only", action="store_true",
                   help="ablation: run the custom CNN alone, skipping branch fusion")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--custom-only", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pca", help="project penultimate features to 2-D and export CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="all", choices=["train", "test", "validation", "all"])
    p.add_argument("--tap", default="penultimate_dense",
                   choices=["penultimate_dense", "fusion_point"])
    p.add_argument("--sign-convention", default="max_abs_positive",
                   choices=["max_abs_positive", "none"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    return parser


def _write_snapshot(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    payload["command"] = command
    payload["package_version"] = __version__
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _select_split(records, which: str):
    if which == "all":
        return records
    chosen = [r for r in records if r.split == which]
    if not chosen:
        raise DataError(f"manifest has no records with split '{which}' (use --split all?)")
    return chosen


# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = Path(args.out)
    _write_snapshot(out, "prepare", args)

    if args.synthetic:
        records = generate_synthetic(out / "images", images_per_class=args.images_per_class,
                                     image_size=args.image_size, seed=args.seed)
    elif args.data_dir:
        records = scan_directory(args.data_dir)
    else:
        records = load_manifest(args.manifest)
    before = class_counts(records)

    if args.augment != "none":
        if args.augment == "default":
            plan = default_plan()
        else:
            plan_path = Path(args.augment)
            if not plan_path.exists():
                raise ConfigurationError(
                    f"augment plan {args.augment!r} is neither 'none', 'default', nor a file")
            plan = plan_from_dict(json.loads(plan_path.read_text(encoding="utf-8")))
        records = apply_plan(records, plan, out / "augmented", seed=args.seed,
                             workers=max(args.workers, 1))
    after = class_counts(records)

    records = split(records, seed=args.seed)
    save_manifest(records, out / "manifest.jsonl")
    for which in ("train", "test", "validation"):
        save_manifest([r for r in records if r.split == which], out / f"{which}.jsonl")
    with open(out / "class_counts.json", "w", encoding="utf-8") as fh:
        json.dump({"before_augmentation": before, "after_augmentation": after},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"{'class':<10} {'before':>8} {'after':>8}")
    for cls in before:
        print(f"{cls:<10} {before[cls]:>8,} {after[cls]:>8,}")
    print(f"{'total':<10} {sum(before.values()):>8,} {sum(after.values()):>8,}")
    for which in ("train", "test", "validation"):
        n = sum(1 for r in records if r.split == which)
        print(f"split {which}: {n:,} records")
    print(f"manifests written under {out}")
    return 0


def cmd_inspect(args) -> int:
    pipeline = resolve_pipeline(args.config)
    graph = pipeline.build_custom()

    name_w = max(len(f"{r.name} ({r.kind})") for r in graph.rows()) + 2
    print(f"{'layer':<{name_w}} {'output shape':<22} {'params':>12}")
    for row in graph.rows():
        shape = "(None, " + ", ".join(str(d) for d in row.output_shape) + ")"
        params = f"{row.params_total:,}" if row.kind != "intersect_marker" else ""
        print(f"{f'{row.name} ({row.kind})':<{name_w}} {shape:<22} {params:>12}")
    trainable, non_trainable = graph.parameter_totals()
    print(f"\ntotal parameters:         {trainable + non_trainable:,}")
    print(f"trainable parameters:     {trainable:,}")
    print(f"non-trainable parameters: {non_trainable:,}")

    if args.expect_trainable is not None and args.expect_trainable != trainable:
        print(f"error: expected {args.expect_trainable:,} trainable parameters, "
              f"got {trainable:,}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    _write_snapshot(out, "train", args)
    pipeline = resolve_pipeline(args.config)

    records = load_manifest(args.manifest)
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        if any(r.split != "unassigned" for r in records):
            raise DataError("manifest has split labels but no train records")
        log.info("manifest carries no split labels; training on all %d records", len(records))
        train_records = records

    custom = pipeline.build_custom().initialize(args.seed)
    log_path = out / "training_log.jsonl"
    log_path.unlink(missing_ok=True)

    branch_epochs = args.branch_epochs if args.branch_epochs is not None else args.epochs
    t0 = time.perf_counter()
    print("phase 1: branch training")
    seen_tasks = []

    def branch_progress(task, st):
        if task not in seen_tasks:
            seen_tasks.append(task)
            print(f"  task {task}")
            print("  " + EpochStats.table_header())
        print("  " + st.table_line())

    results = train_branches(
        train_records, (pipeline.branch_ns, pipeline.branch_ct),
        input_shape=custom.input_shape, epochs=branch_epochs, batch_size=args.batch,
        lr=args.lr, seed=args.seed, log_path=log_path, progress=branch_progress)
    branch_graphs = {}
    for task, ckpt_name in (("normal_vs_stone", "branch_normal_stone.ckpt"),
                            ("cyst_vs_tumor", "branch_cyst_tumor.ckpt")):
        graph, _, opt = results[task]
        save_checkpoint(out / ckpt_name, graph, optimizer=opt, epoch=branch_epochs,
                        seed=args.seed)
        branch_graphs[task] = graph

    hybrid = pipeline.build_hybrid(custom, branch_graphs["normal_vs_stone"],
                                   branch_graphs["cyst_vs_tumor"], tau=args.tau)
    hybrid.initialize_projection(args.seed + 3)

    print("phase 2: hybrid training" +
          (" (branches fine-tuned)" if args.fine_tune_branches else " (branches frozen)"))
    print(EpochStats.table_header())
    _, opt = train_hybrid(
        train_records, hybrid, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        seed=args.seed, freeze_branches=not args.fine_tune_branches, log_path=log_path,
        progress=lambda st: print(st.table_line()))
    save_checkpoint(out / "hybrid.ckpt", hybrid, optimizer=opt, epoch=args.epochs,
                    seed=args.seed)
    print(f"checkpoints and {log_path.name} written under {out} "
          f"({time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    _write_snapshot(out, "eval", args)
    model = restore_model(load_checkpoint(args.checkpoint))
    if args.custom_only and not isinstance(model, HybridModel):
        raise ConfigurationError("--custom-only only applies to hybrid checkpoints")
    records = _select_split(load_manifest(args.manifest), args.split)

    report, cm = evaluate_model(model, records, batch_size=args.batch,
                                custom_only=args.custom_only)
    payload = report.to_dict()
    payload["confusion"] = cm.to_dict()
    payload["split"] = args.split
    payload["checkpoint"] = str(args.checkpoint)
    with open(out / "eval_report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "confusion.csv", "w", encoding="utf-8") as fh:
        fh.write("actual\\predicted," + ",".join(cm.classes) + "\n")
        for cls, row in zip(cm.classes, cm.counts):
            fh.write(cls + "," + ",".join(str(int(v)) for v in row) + "\n")

    print(f"evaluated {report.total:,} records ({args.split}) in {report.eval_seconds:.2f}s")
    print(f"accuracy {100 * report.accuracy:.2f}%  macro precision {100 * report.macro_precision:.2f}%  "
          f"macro recall {100 * report.macro_recall:.2f}%  macro F1 {100 * report.macro_f1:.2f}%")
    print(f"report written to {out / 'eval_report.json'}")
    return 0


def cmd_predict(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    if args.custom_only and not isinstance(model, HybridModel):
        raise ConfigurationError("--custom-only only applies to hybrid checkpoints")
    h, w, _ = model.input_shape
    img = decode_and_resize(args.image, (h, w))
    kwargs = {"custom_only": True} if args.custom_only else {}
    logits = model.forward(Tensor(img[None]), mode="infer", **kwargs)
    probs = softmax(logits).data[0]
    idx = int(probs.argmax())
    print(json.dumps({
        "image": str(args.image),
        "label": model.classes[idx],
        "probabilities": {cls: float(p) for cls, p in zip(model.classes, probs)},
    }, indent=2, sort_keys=True))
    return 0


def cmd_pca(args) -> int:
    out = Path(args.out)
    _write_snapshot(out, "pca", args)
    model = restore_model(load_checkpoint(args.checkpoint))
    records = _select_split(load_manifest(args.manifest), args.split)

    features, labels = extract_features(model, records, args.tap, batch_size=args.batch)
    proj = pca2(features, args.sign_convention, seed=args.seed)

    scatter = out / "pca_scatter.csv"
    with open(scatter, "w", encoding="utf-8") as fh:
        fh.write("x,y,label\n")
        for (x, y), li in zip(proj.coords, labels):
            fh.write(f"{float(x)!r},{float(y)!r},{model.classes[li]}\n")
    with open(out / "pca_summary.json", "w", encoding="utf-8") as fh:
        json.dump({
            "samples": int(features.shape[0]),
            "feature_dim": int(features.shape[1]),
            "tap": args.tap,
            "sign_convention": args.sign_convention,
            "eigenvalues": proj.eigenvalues.tolist(),
            "explained_variance_ratio": proj.explained_variance_ratio.tolist(),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"projected {features.shape[0]:,} samples from {args.tap} "
          f"(explained variance {proj.explained_variance_ratio[0]:.3f} + "
          f"{proj.explained_variance_ratio[1]:.3f})")
    print(f"scatter written to {scatter}")
    return 0


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    level = os.environ.get("HCNN_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except HybridCnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
