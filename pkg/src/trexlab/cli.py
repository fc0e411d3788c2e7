"""Command-line entry point: ``trexlab {train,eval,analyze,report,synth}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import analysis
from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, RunConfig, load_config, load_recipe, resolve
from .data import TEST, DatasetFormatError, SyntheticSpec, generate_synthetic, load_trxd, save_trxd
from .evalsuite import TransferReport, extract_features, transfer_report
from .objectives import MemoryBank, compute_prototypes
from .training import Trainer, TrainingFault, read_metrics, write_metrics

EXIT_USAGE, EXIT_INPUT, EXIT_FAULT = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _config(path: str) -> RunConfig:
    if path.startswith("recipe:"):
        return load_recipe(path[len("recipe:"):])
    return load_config(path)


def _absolute_paths(cfg: RunConfig, base: Path) -> RunConfig:
    """Make dataset paths absolute so the resolved config works from any directory."""
    doc = cfg.to_dict()
    for src in [doc["data"]["train"]] + doc["data"]["transfer"]:
        if src.get("path") and not Path(src["path"]).is_absolute():
            src["path"] = str((base / src["path"]).resolve())
    return RunConfig.model_validate(doc)


def _datasets(paths: Optional[List[str]], cfg: Optional[RunConfig]):
    if paths:
        return [load_trxd(p) for p in paths]
    if cfg is None:
        raise CliError("no datasets given (use --data)")
    return [cfg.data.train.load()] + [s.load() for s in cfg.data.transfer]


def _checkpoint_config(path) -> RunConfig:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    meta, _, _ = read_checkpoint(path)
    return RunConfig.model_validate(meta["run_config"])


# --- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args.config)
    base = Path(args.config).resolve().parent if not args.config.startswith("recipe:") else Path.cwd()
    cfg = _absolute_paths(cfg, base)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        cfg = cfg.model_copy(update={"io": cfg.io.model_copy(update=updates)})
    dataset = cfg.data.train.load()
    cfg = resolve(cfg, dataset.n_classes)
    run_dir = Path(cfg.io.output_dir) / cfg.io.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved-config.json").write_text(cfg.to_json() + "\n")

    trainer = Trainer(cfg, dataset)
    metrics = run_dir / "metrics.jsonl"
    if args.resume:
        trainer.load(args.resume)
        kept = [r for r in read_metrics(metrics) if r.step < trainer.step] if metrics.exists() else []
        write_metrics(kept, metrics)
    else:
        write_metrics([], metrics)
    every = cfg.io.checkpoint_every * trainer.steps_per_epoch

    def on_step(tr, recs):
        write_metrics(recs, metrics, append=True)
        if every and tr.step % every == 0 and not tr.finished:
            tr.save(run_dir / "last.trxc")

    trainer.run(until_step=args.stop_at, callback=on_step)
    if trainer.finished:
        trainer.save(run_dir / "final.trxc")
        _train_summary(read_metrics(metrics), run_dir / "train-summary.csv", trainer.steps_per_epoch)
    else:
        trainer.save(run_dir / "last.trxc")
    print(f"{cfg.io.run_name}: {trainer.step}/{trainer.total_steps} steps -> {run_dir}")
    return 0


def _train_summary(records, path, steps_per_epoch: int) -> None:
    by_epoch = {}
    for r in records:
        if r.name in ("loss", "batch_acc"):
            by_epoch.setdefault(r.epoch, {}).setdefault(r.name, []).append(r.value)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "mean_batch_acc", "steps"])
        for epoch in sorted(by_epoch):
            d = by_epoch[epoch]
            acc = float(np.mean(d["batch_acc"])) if "batch_acc" in d else ""
            w.writerow([epoch, float(np.mean(d["loss"])), acc, len(d["loss"])])


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("eval needs --checkpoint", EXIT_USAGE)
    cfg = _checkpoint_config(args.checkpoint)
    datasets = _datasets(args.data, cfg)
    report = transfer_report(args.checkpoint, datasets, cfg.eval, seed=args.seed or 0,
                             train_task=len(datasets) > 1)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    for r in report.rows:
        flag = " (clamped)" if r.clamped else ""
        print(f"{r.dataset:>16} {r.role:>8} acc={r.accuracy:.4f} log_odds={r.log_odds:+.4f}{flag}")
    print(f"mean transfer log odds: {report.mean_log_odds:+.4f}")
    return 0


def cmd_analyze(args) -> int:
    if not args.checkpoint:
        raise CliError("analyze needs --checkpoint", EXIT_USAGE)
    cfg = _checkpoint_config(args.checkpoint)
    datasets = _datasets(args.data, cfg)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    result = {"datasets": {}, "dynamics": {}}
    for ds in datasets:
        fs = extract_features(args.checkpoint, ds, cfg.eval.short_side, cfg.eval.batch_size)
        idx = np.flatnonzero(fs.splits == TEST)
        idx = idx if idx.size >= 2 else np.arange(len(fs.labels))
        result["datasets"][ds.name] = analysis.analyze_features(fs.features[idx], fs.labels[idx], cfg.analysis)

    class_vectors = _class_vectors(args.checkpoint)
    if class_vectors is not None:
        name, classes, vecs = class_vectors
        k = min(5, len(vecs) - 1)
        result["nearest_" + name] = {
            str(c): [int(classes[j]) for j in analysis.nearest_prototypes(vecs, i, k)] for i, c in enumerate(classes)
        } if k > 0 else {}

    metrics = Path(args.checkpoint).parent / "metrics.jsonl"
    if metrics.exists():
        series = {}
        for r in read_metrics(metrics):
            if r.name in ("grad_abs_cos_sim", "grad_std", "grad_fro", "delta_W", "delta_U"):
                series.setdefault(r.name, []).append((r.step, r.value))
        for name, points in series.items():
            result["dynamics"][name] = {"step": [p[0] for p in points], "value": [p[1] for p in points]}
            with open(out / f"series-{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", name])
                w.writerows(points)
    with open(out / "analysis.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    for name, metrics_ in result["datasets"].items():
        print(name, {k: round(v, 4) for k, v in metrics_.items() if isinstance(v, float)})
    return 0


def _class_vectors(path):
    """(kind, class ids, vectors): EMA prototypes for memory objectives, else class weights."""
    meta, _, tensors = read_checkpoint(path)
    if "bank/z" in tensors:
        bank = MemoryBank.from_state({k[5:]: v for k, v in tensors.items() if k.startswith("bank/")})
        protos = compute_prototypes(bank, int(meta["n_classes"]))
        present = np.flatnonzero(protos.present)
        return "prototypes", present, protos.normalized[present]
    if "param/classifier.weight" in tensors:
        w = tensors["param/classifier.weight"]
        return "class_weights", np.arange(len(w)), w
    return None


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        run = Path(run)
        rep_path = run / "report.json"
        if not rep_path.exists():
            raise CliError(f"{run}: no report.json (run `trexlab eval` first)")
        report = TransferReport.from_dict(json.loads(rep_path.read_text()))
        metrics = run / "metrics.jsonl"
        losses = [r.value for r in read_metrics(metrics) if r.name == "loss"] if metrics.exists() else []
        rows.append({
            "run": run.name,
            "train_accuracy": report.train_accuracy,
            "mean_log_odds": report.mean_log_odds,
            "final_loss": losses[-1] if losses else None,
            "steps": len(losses),
        })
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(out / "summary.json", "w") as fh:
        json.dump(rows, fh, indent=2)
    for r in rows:
        print(f"{r['run']}: train acc {r['train_accuracy']}, mean log odds {r['mean_log_odds']:+.4f}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed or 0, family=args.family, n_classes=args.classes,
                         per_class=tuple(args.per_class), image_size=args.size, nuisance=args.nuisance)
    save_trxd(generate_synthetic(spec), args.out)
    print(f"wrote {args.out}")
    return 0


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trexlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True, help="JSON run config, or recipe:<name>")
    t.add_argument("--out", help="output directory (overrides io.output_dir)")
    t.add_argument("--seed", type=int, help="overrides io.seed")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-at", type=int, dest="stop_at", help="stop after this many steps (for testing resume)")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "linear-probe transfer evaluation"),
                                 ("analyze", cmd_analyze, "feature and training-dynamics analysis")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint")
        e.add_argument("--data", nargs="+", help=".trxd files; the first is the training task")
        e.add_argument("--out")
        e.add_argument("--seed", type=int)
        e.set_defaults(func=func)

    r = sub.add_parser("report", help="merge run reports into summary.csv")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic .trxd dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--family", type=int, default=0)
    s.add_argument("--classes", type=int, default=16)
    s.add_argument("--per-class", type=int, nargs=3, default=(64, 0, 32), dest="per_class")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--nuisance", type=float, default=0.5)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    value = os.environ.get("TREX_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as err:
        print(f"config error:\n{err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingFault as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAULT
    except (CliError,) as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (CheckpointError, DatasetFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
