"""Command-line entry point: ``frhead <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import metrics as M
from .checkpoint import CheckpointError
from .gradcheck import run_gradcheck
from .skeleton import DatasetFormatError, Modality, SyntheticConfig, generate_synthetic, read_dataset, write_dataset
from .trainer import (
    ABLATIONS,
    RunLog,
    RunLogError,
    TrainConfig,
    TrainingDivergedError,
    dump_config,
    evaluate,
    load_config,
    load_model,
    prepare_inputs,
    save_model,
    stratified_split,
    train,
)

RUNTIME_ERRORS = (OSError, ValueError, KeyError, RuntimeError, DatasetFormatError, CheckpointError, RunLogError,
                  TrainingDivergedError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _stages(text: str):
    try:
        stages = tuple(sorted({int(s) for s in text.split(",") if s.strip()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}")
    if not set(stages) <= {1, 2, 3, 4}:
        raise argparse.ArgumentTypeError("stages must be drawn from 1,2,3,4")
    return stages


def _int_list(text: str):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}")


def _echo(title: str, payload) -> None:
    print(f"# {title}")
    print(payload if isinstance(payload, str) else json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        num_classes=args.classes,
        num_joints=args.joints,
        frames=args.frames,
        samples_per_class=args.per_class,
        n_spatial_pairs=args.spatial_pairs,
        n_temporal_pairs=args.temporal_pairs,
        noise_std=args.noise,
        spatial_offset=args.offset,
    )
    cfg.validate()
    _echo("gen-data", {**vars(cfg), "seed": args.seed, "out": str(args.out)})
    dataset, manifest = generate_synthetic(cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, dataset, manifest)
    print(f"wrote {len(dataset)} samples, {manifest.num_classes} classes, ambiguous pairs {manifest.ambiguity}")
    return 0


# ---------------------------------------------------------------------------
# train


def resolve_train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.ablation:
        cfg.apply_ablation(args.ablation)
    overrides = {
        "seed": args.seed, "modality": args.modality, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "warmup_epochs": args.warmup, "precision": args.precision, "frames": args.frames,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.decay is not None:
        cfg.decay_epochs = args.decay
    if args.tau is not None:
        cfg.head.tau = args.tau
    if args.wcl is not None:
        cfg.head.w_cl = args.wcl
    if args.hidden is not None:
        cfg.head.hidden = args.hidden
    lambdas = list(cfg.head.lambdas)
    for i in range(4):
        value = getattr(args, f"lambda{i + 1}")
        if value is not None:
            lambdas[i] = value
    cfg.head.lambdas = tuple(lambdas)
    if args.stages is not None:
        cfg.head.stages = args.stages
    if args.base_channels is not None:
        cfg.backbone.base_channels = args.base_channels
    if args.no_deterministic:
        cfg.deterministic = False
    cfg.validate()
    return cfg


def _save_scores(path: Path, result) -> None:
    np.savez(path, logits=result.logits, probs=result.probs, labels=result.labels)


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    _echo("resolved config", dump_config(cfg))
    dataset, manifest = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x = prepare_inputs(dataset, cfg.modality, cfg.frames, cfg.dtype)
    result = train(dataset, cfg, inputs=x)
    model, log = result.model, result.log
    save_model(out / "last.frh", model, cfg, result.optimizer, extra={"epoch": cfg.epochs - 1})
    model.load_state_dict(result.best_state)
    save_model(out / "checkpoint.frh", model, cfg, result.optimizer,
               extra={"best_epoch": log.best_epoch})
    log.save(out / "runlog")
    (out / "config.ini").write_text(dump_config(cfg))
    labels = dataset.labels
    test = evaluate(model, x[result.test_idx], labels[result.test_idx])
    _save_scores(out / "scores.npz", test)
    ambiguous = manifest.ambiguous_classes()
    report = M.build_metrics(test.probs, test.labels, dataset.num_classes, anchors=ambiguous or None)
    M.write_report(log, report, out / "report")
    for r in log.records:
        print(f"epoch {r['epoch']:3d} lr {r['lr']:.5f} ce {r['loss_ce']:.4f} cl {r['loss_cl']:.4f} "
              f"total {r['loss_total']:.4f} train {r['train_acc']:.4f} eval {r['eval_acc']:.4f}")
    print(f"best epoch {log.best_epoch}, test accuracy {test.accuracy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    model, cfg, meta = load_model(args.checkpoint)
    dataset, manifest = read_dataset(args.data)
    x = prepare_inputs(dataset, args.modality or cfg.modality, cfg.frames, cfg.dtype)
    labels = dataset.labels
    if args.split == "all":
        idx = np.arange(len(labels))
    else:
        train_idx, test_idx = stratified_split(labels, cfg.test_fraction, cfg.seed)
        idx = train_idx if args.split == "train" else test_idx
    result = evaluate(model, x[idx], labels[idx])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_scores(out / f"scores_{args.split}.npz", result)
    if args.embeddings:
        M.export_embeddings(result.embeddings, result.labels, out / f"embeddings_{args.split}.csv")
    report = M.build_metrics(result.probs, result.labels, dataset.num_classes,
                             anchors=manifest.ambiguous_classes() or None)
    (out / f"metrics_{args.split}.json").write_text(json.dumps(M._json_safe(report), sort_keys=True, indent=2))
    print(f"{args.split} accuracy {result.accuracy:.6f} on {len(idx)} samples")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    if args.size != "tiny":
        raise ValueError("only --size tiny is available")
    _echo("gradcheck", {"size": args.size, "seed": args.seed, "tolerance": args.tolerance,
                        "max_coords": args.max_coords})
    r = run_gradcheck(seed=args.seed, max_coords=args.max_coords or None)
    print(f"max relative error {r.max_error:.6e} over {r.coordinates} coordinates "
          f"(labels {r.labels}, preds {r.preds}, {r.seconds:.1f} s)")
    ok = r.passed(args.tolerance)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    dataset, manifest = read_dataset(args.data)
    ambiguous = manifest.ambiguous_classes()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in args.variants:
        for seed in range(args.seeds):
            args.ablation, args.seed = variant, seed
            cfg = resolve_train_config(args)
            cfg.eval_train = False
            x = prepare_inputs(dataset, cfg.modality, cfg.frames, cfg.dtype)
            result = train(dataset, cfg, inputs=x)
            labels = dataset.labels[result.test_idx]
            ev = evaluate(result.model, x[result.test_idx], labels)
            cm = M.confusion(ev.preds, labels, dataset.num_classes)
            per_class = cm.per_class_accuracy()
            amb = float(np.nanmean(per_class[ambiguous])) if ambiguous else float("nan")
            rows.append({"variant": variant, "seed": seed, "accuracy": ev.accuracy, "ambiguous_accuracy": amb})
            print(f"{variant:12s} seed {seed} accuracy {ev.accuracy:.4f} ambiguous {amb:.4f}", flush=True)
    summary = {}
    for variant in args.variants:
        sel = [r for r in rows if r["variant"] == variant]
        summary[variant] = {
            "accuracy": float(np.mean([r["accuracy"] for r in sel])),
            "ambiguous_accuracy": float(np.mean([r["ambiguous_accuracy"] for r in sel])),
            "seeds": len(sel),
        }
        print(f"{variant:12s} mean accuracy {summary[variant]['accuracy']:.4f} "
              f"ambiguous {summary[variant]['ambiguous_accuracy']:.4f}")
    (out / "ablation.json").write_text(json.dumps({"runs": rows, "summary": summary}, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# fuse / report


def _load_scores(path):
    with np.load(path) as z:
        return z["logits"], z["labels"]


def cmd_fuse(args) -> int:
    logits, labels = zip(*(_load_scores(p) for p in args.scores))
    if any(not np.array_equal(labels[0], lab) for lab in labels[1:]):
        raise ValueError("score files cover different samples")
    fused = M.fuse_streams(list(logits), args.weights)
    acc = float((fused.argmax(axis=1) == labels[0]).mean()) if len(labels[0]) else 0.0
    for p, lg in zip(args.scores, logits):
        print(f"{p}: accuracy {float((lg.argmax(axis=1) == labels[0]).mean()):.6f}")
    print(f"fused accuracy {acc:.6f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        np.savez(out, fused=fused, labels=labels[0])
    return 0


def cmd_report(args) -> int:
    log = RunLog.load(args.log)
    report = {}
    if args.scores:
        with np.load(args.scores) as z:
            probs, labels = z["probs"], z["labels"]
        report = M.build_metrics(probs, labels, probs.shape[1])
    paths = M.write_report(log, report, args.out, svg=not args.no_svg)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset file written by gen-data")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--modality", choices=[m.value for m in Modality])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--decay", type=_int_list, help="decay epochs, e.g. 35,55; empty for none")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--frames", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--wcl", type=float)
    for i in range(1, 5):
        p.add_argument(f"--lambda{i}", type=float)
    p.add_argument("--stages", type=_stages, help="comma list drawn from 1,2,3,4")
    p.add_argument("--no-deterministic", action="store_true", help="record wall-clock times")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frhead", description="Skeleton action recognition with a feature refinement head.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic skeleton dataset")
    p.add_argument("--out", default="data/synthetic.skl")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--joints", type=int, default=15)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--spatial-pairs", type=int, default=2)
    p.add_argument("--temporal-pairs", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--offset", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--modality", choices=[m.value for m in Modality])
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", action="store_true", help="also export pooled embeddings as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    p.add_argument("--size", choices=["tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=16, help="coordinates per parameter tensor; 0 = all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train each ablation variant over several seeds")
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", choices=sorted(ABLATIONS), default=["baseline", "full"])
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_ablate, ablation=None)

    p = sub.add_parser("fuse", help="fuse saved score matrices")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("report", help="regenerate report files from a run log")
    p.add_argument("--log", required=True, help="runlog.json")
    p.add_argument("--scores", help="scores .npz from train or eval")
    p.add_argument("--out", required=True)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    print(f"# command: frhead {shlex.join(argv)}")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
