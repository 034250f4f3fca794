"""Benchmark command line: preprocess data, train models, run loss grids.

Subcommands: preprocess, train, eval, bench, per-timestamp, report.
Set SEQLAB_DEBUG=1 to enable per-forward numeric assertions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .data import (
    build_sequences,
    build_vocabulary,
    dedup_user_item,
    ingest_interactions,
    k_core_filter,
    leave_one_out_split,
    load_dataset,
    write_sequence_lines,
    write_vocabulary,
)
from .errors import ConfigError, SeqLabError
from .evaluation import (
    ResourceReport,
    full_rank_metrics,
    per_timestamp_eval,
    sampled_metrics,
)
from .losses import LOSS_KINDS, SAMPLED_KINDS, LossSpec
from .models import MODEL_NAMES, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, check_compatible, fit, write_train_log

FORMATS = {"csv": "csv-triples", "seq": "sequence-lines"}


def build_identifier() -> str:
    """Stable short hash of the installed package sources."""
    digest = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def _add_dataset_flags(p):
    p.add_argument("--dataset", required=True, help="path to the interaction log")
    p.add_argument("--format", choices=sorted(FORMATS), default="seq")
    p.add_argument("--kcore", type=int, default=1, help="k-core filter threshold")
    p.add_argument("--dedup", action="store_true", help="keep only the first (user, item) interaction")


def _add_model_flags(p):
    p.add_argument("--model", choices=sorted(MODEL_NAMES), default="sasrec")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.2)


def _add_train_flags(p):
    p.add_argument("--loss", choices=sorted(LOSS_KINDS), default="ce-all")
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--mask-prob", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)


def _model_config(args, arch) -> ModelConfig:
    return ModelConfig(
        arch=arch, dim=args.dim, layers=args.layers, heads=args.heads,
        max_len=args.max_len, dropout=args.dropout,
    )


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        patience=args.patience, seed=args.seed if seed is None else seed,
    )


def _load_split(args):
    return load_dataset(args.dataset, FORMATS[args.format], kcore=args.kcore,
                        dedup=getattr(args, "dedup", False))


# preprocess ---------------------------------------------------------------


def cmd_preprocess(args) -> int:
    raw = ingest_interactions(args.dataset, FORMATS[args.format])
    if args.dedup and raw and not hasattr(raw[0], "items"):
        raw = dedup_user_item(raw)
    if args.kcore > 1:
        raw = k_core_filter(raw, args.kcore)
    vocab = build_vocabulary(raw)
    sequences = build_sequences(raw, vocab)
    if not sequences:
        raise ConfigError("no user kept at least 3 interactions after filtering")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sequence_lines(out / "sequences.txt", sequences, vocab)
    write_vocabulary(out / "vocabulary.tsv", vocab)
    interactions = sum(len(s.items) for s in sequences)
    users = len(sequences)
    density = interactions / (users * vocab.size)
    print(f"Users           {users}")
    print(f"Items           {vocab.size}")
    print(f"Interactions    {interactions}")
    print(f"Average Length  {interactions / users:.2f}")
    print(f"Density         {100.0 * density:.2f}%")
    print(f"wrote {out / 'sequences.txt'} and {out / 'vocabulary.tsv'}")
    return 0


# train ----------------------------------------------------------------------


def run_single(split, arch, args, seed, out_dir: Path) -> dict:
    """Train one (model, loss, seed) cell and write its artifacts."""
    spec = LossSpec.from_options(args.loss, negatives=args.negatives, mask_prob=args.mask_prob)
    model = build_model(_model_config(args, arch), split.vocab.size)
    check_compatible(model, spec)

    config = _train_config(args, seed=seed)
    result = fit(model, split, config, spec)
    valid = full_rank_metrics(model, result.params, split, "valid")
    test = full_rank_metrics(model, result.params, split, "test")
    last = result.records[-1]
    resources = ResourceReport(
        seconds=sum(r.seconds for r in result.records),
        score_evals=last.score_evals,
        neg_samples=last.neg_samples,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.npz", result.params, seed, spec.label())
    write_train_log(out_dir / "train_log.tsv", result.records)
    run = {
        "config": {
            "model": arch,
            "loss": spec.label(),
            "loss_kind": spec.kind,
            "negatives": spec.negatives,
            "mask_prob": spec.mask_prob,
            "seed": seed,
            "model_config": asdict(model.config),
            "train_config": asdict(config),
            "dataset": str(args.dataset),
            "parallel_workers": getattr(args, "parallel_workers", 0),
        },
        "valid": valid.to_dict(),
        "test": test.to_dict(),
        "resources": resources.to_dict(),
        "epochs_trained": len(result.records),
        "best_epoch": result.best_epoch,
        "build": build_identifier(),
    }
    (out_dir / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True))
    return run


def cmd_train(args) -> int:
    split = _load_split(args)
    run = run_single(split, MODEL_NAMES[args.model], args, args.seed, Path(args.out))
    print(json.dumps({"valid": run["valid"], "test": run["test"]}, indent=2, sort_keys=True))
    return 0


# eval -------------------------------------------------------------------


def cmd_eval(args) -> int:
    split = _load_split(args)
    model, params, meta = load_checkpoint(args.checkpoint)
    reports = [
        full_rank_metrics(model, params, split, "valid"),
        full_rank_metrics(model, params, split, "test"),
    ]
    if args.sampled:
        reports.append(sampled_metrics(model, params, split, seed=meta["seed"],
                                       negatives=args.sampled))
    for report in reports:
        print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


# bench ----------------------------------------------------------------------


SUMMARY_COLUMNS = ("model", "loss", "seed", "hit@10", "ndcg@10", "score_evals", "neg_samples")


def _summary_rows(runs: list) -> list:
    rows = []
    for run in runs:
        if run.get("error"):
            rows.append({
                "model": run["config"]["model"], "loss": run["config"]["loss"],
                "seed": run["config"]["seed"], "hit@10": "", "ndcg@10": "",
                "score_evals": "", "neg_samples": "", "error": run["error"],
            })
            continue
        rows.append({
            "model": run["config"]["model"],
            "loss": run["config"]["loss"],
            "seed": run["config"]["seed"],
            "hit@10": f"{run['test']['hit@10']:.6f}",
            "ndcg@10": f"{run['test']['ndcg@10']:.6f}",
            "score_evals": str(run["resources"]["score_evals"]),
            "neg_samples": str(run["resources"]["neg_samples"]),
            "error": "",
        })
    return rows


def write_summary(out: Path, runs: list):
    """Markdown table (with wall-clock) plus a deterministic CSV twin."""
    rows = _summary_rows(runs)
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in SUMMARY_COLUMNS) + "\n")
    with open(out / "summary.md", "w", encoding="utf-8") as fh:
        header = ("model", "loss", "seed", "hit@10", "ndcg@10", "seconds", "score_evals")
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "---|" * len(header) + "\n")
        for run, row in zip(runs, rows):
            seconds = "" if run.get("error") else f"{run['resources']['seconds']:.1f}"
            cells = (row["model"], row["loss"], str(row["seed"]), row["hit@10"],
                     row["ndcg@10"], seconds, row["score_evals"])
            fh.write("| " + " | ".join(cells) + " |\n")


def _bench_cell(payload):
    """One grid cell; returns the run dict (errors folded in, not raised)."""
    split, model_name, cell_args, seed, out_dir = payload
    spec = LossSpec.from_options(cell_args.loss, negatives=cell_args.negatives,
                                 mask_prob=cell_args.mask_prob)
    try:
        return run_single(split, MODEL_NAMES[model_name], cell_args, seed, out_dir)
    except SeqLabError as exc:
        run = {
            "config": {"model": MODEL_NAMES[model_name], "loss": spec.label(),
                       "seed": seed},
            "error": str(exc),
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True))
        return run


def cmd_bench(args) -> int:
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    loss_kinds = [x.strip() for x in args.losses.split(",") if x.strip()]
    negatives = [int(x) for x in args.negatives_grid.split(",") if x.strip()]
    seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
    if not models or not loss_kinds or not seeds:
        raise ConfigError("bench needs at least one model, loss, and seed")
    for m in models:
        if m not in MODEL_NAMES:
            raise ConfigError(f"unknown model {m!r}")

    split = _load_split(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for model_name in models:
        for kind in loss_kinds:
            n_grid = negatives if kind in SAMPLED_KINDS else [None]
            for n_neg in n_grid:
                for seed in seeds:
                    cell_args = argparse.Namespace(**vars(args))
                    cell_args.loss = kind
                    cell_args.negatives = n_neg if n_neg else 1
                    if args.parallel:
                        cell_args.parallel_workers = args.parallel
                    spec = LossSpec.from_options(kind, negatives=cell_args.negatives,
                                                 mask_prob=args.mask_prob)
                    name = f"{model_name}-{spec.label()}-s{seed}"
                    cells.append((split, model_name, cell_args, seed, out / name))

    if args.parallel > 1:
        # wall-clock columns lose meaning under contention; runs are stamped
        # with the worker count so readers can tell
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            runs = list(pool.map(_bench_cell, cells))
    else:
        runs = [_bench_cell(cell) for cell in cells]
    failed = 0
    for cell, run in zip(cells, runs):
        status = "FAILED" if run.get("error") else "ok"
        failed += bool(run.get("error"))
        print(f"[{cell[4].name}] {status}")
    write_summary(out, runs)
    print(f"summary written to {out / 'summary.md'} and {out / 'summary.csv'}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    out = Path(args.runs)
    cells = sorted(p for p in out.iterdir() if (p / "run.json").exists())
    if not cells:
        raise ConfigError(f"no run.json files under {out}")
    runs = [json.loads((p / "run.json").read_text()) for p in cells]
    write_summary(out, runs)
    print(f"summary rebuilt from {len(runs)} runs")
    return 0


# per-timestamp ----------------------------------------------------------


def cmd_per_timestamp(args) -> int:
    split = _load_split(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for path in args.checkpoint:
        if not Path(path).exists():
            raise ConfigError(f"missing checkpoint: expected file at {path}")
        model, params, meta = load_checkpoint(path)
        label = meta.get("loss") or Path(path).stem
        report = per_timestamp_eval(model, params, split)
        report.write_csv(out / f"per_timestamp_{label}.csv")
        reports[label] = report
    labels = sorted(reports)
    merged = out / "per_timestamp_merged.csv"
    with open(merged, "w", encoding="utf-8") as fh:
        header = ["position"]
        for label in labels:
            header += [f"{label}_hit10", f"{label}_ndcg10"]
        fh.write(",".join(header) + "\n")
        width = max(len(r.positions) for r in reports.values())
        for i in range(width):
            cells = [str(i + 1)]
            for label in labels:
                r = reports[label]
                cells += [f"{r.hit10[i]:.6f}", f"{r.ndcg10[i]:.6f}"]
            fh.write(",".join(cells) + "\n")
    print(f"wrote {merged}")
    return 0


# entry point -----------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqlab",
                                     description="sequential-recommendation loss laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="filter a raw log and write sequence lines")
    _add_dataset_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model with one loss")
    _add_dataset_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sampled", type=int, default=0,
                   help="also report sampled metrics with this many negatives")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a model x loss x seed grid")
    _add_dataset_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--models", default="sasrec", help="comma-separated model list")
    p.add_argument("--losses", default="ce-all", help="comma-separated loss list")
    p.add_argument("--negatives-grid", default="1", help="comma-separated N_s list")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--parallel", type=int, default=0,
                   help="run cells in this many worker processes; degrades "
                        "wall-clock fidelity and stamps the runs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("per-timestamp", help="per-position metrics for checkpoints")
    _add_dataset_flags(p)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path; repeat for several losses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_per_timestamp)

    p = sub.add_parser("report", help="rebuild summary tables from run results")
    p.add_argument("--runs", required=True, help="bench output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SeqLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
