"""``qumatl`` command line: generate, train, eval, ablate, sweep, attn, bench.

Exit codes: 0 success, 2 invalid input or config, 3 file I/O or format
errors, 4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_override
from .data import MISSING, Dataset, DatasetFormatError, generate_synthetic, load_dataset, save_dataset, split
from .harness import (
    ExperimentReport,
    attention_fidelity,
    dump_attention,
    efficiency_report,
    run_experiment,
    score_consensus,
    sparse_sweep,
)
from .metrics import consistency_matrix, evaluate_predictions
from .model import CheckpointError, QumatlModel, load_checkpoint, save_checkpoint
from .train import NonFiniteLossError, predict_labels, train

log = logging.getLogger("qumatl")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_VERSION = 1


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------- helpers


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(
    path: Path,
    command: str,
    cfg: Optional[RunConfig],
    inputs: Sequence[Path],
    artifacts: Sequence[Path],
    extra: Optional[dict] = None,
) -> None:
    """Config snapshot, seeds, and sha256 of every input and output file."""
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": cfg.snapshot() if cfg is not None else None,
        "seeds": list(cfg.seeds) if cfg is not None else [],
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": {str(p): sha256_file(p) for p in artifacts},
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def matrix_text(values: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:8.4f}" for v in row) for row in values)


def check_dims(cfg: RunConfig, data: Dataset) -> None:
    want = (cfg["num_annotators"], cfg["num_classes"], cfg["num_tokens"])
    got = (data.num_annotators, data.num_classes, data.num_tokens)
    if want != got:
        raise UsageError(
            f"dataset has (num_annotators, num_classes, num_tokens) = {got} but config expects {want}"
        )


def check_compatible(model: QumatlModel, data: Dataset) -> None:
    c = model.config
    want = (c.num_annotators, c.num_classes, c.num_tokens, c.raw_dim)
    got = (data.num_annotators, data.num_classes, data.num_tokens, data.raw_dim)
    if want != got:
        raise UsageError(
            f"checkpoint expects (num_annotators, num_classes, num_tokens, raw_dim) = {want}, dataset has {got}"
        )


def write_predictions(preds: np.ndarray, path: Path) -> None:
    """One row per sample, one column per annotator."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"A_{k + 1}" for k in range(preds.shape[1])])
        writer.writerows(preds.tolist())


def read_predictions(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"{path}: empty prediction file")
    try:
        return np.array([[int(v) for v in row] for row in rows[1:]], dtype=np.int64).reshape(len(rows) - 1, len(rows[0]))
    except ValueError as exc:
        raise UsageError(f"{path}: malformed prediction row ({exc})") from exc


def _write_report(report: ExperimentReport, out: Path, name: str) -> list[Path]:
    paths = [out / f"{name}.csv", out / "aggregates.csv", out / "summary.txt"]
    paths[0].write_text(report.to_csv())
    paths[1].write_text(report.aggregates_csv())
    paths[2].write_text(report.summary())
    # wall-clock numbers vary run to run, so they stay out of the hashed artifacts
    (out / "timings.csv").write_text(report.timings_csv())
    return paths


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    data = generate_synthetic(cfg.generator())
    save_dataset(data, out)
    manifest = out.with_suffix(".manifest.json")
    write_manifest(manifest, "generate", cfg, [args.config], [out])
    m = consistency_matrix(data.labels.T, data.num_classes)
    print("consistency matrix M:")
    print(matrix_text(m.values))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = load_dataset(args.data)
    check_dims(cfg, data)
    train_set, val_set, _ = split(data, cfg["split"], cfg["seed"])
    model = QumatlModel(cfg.model(data.raw_dim), cfg["variant"])
    best, history = train(model, train_set, val_set, cfg.train())
    out = Path(args.out)
    save_checkpoint(best, out)
    hist_path = out.with_suffix(".history.csv")
    hist_path.write_text(history.to_csv())
    write_manifest(out.with_suffix(".manifest.json"), "train", cfg, [args.config, args.data], [out, hist_path])
    print(f"best val loss {history.best_val_loss:.6f} at epoch {history.best_epoch} "
          f"({len(history.epochs)} epochs run)")
    return EXIT_OK


def cmd_eval(args, cfg: Optional[RunConfig]) -> int:
    data = load_dataset(args.data)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    source = Path(args.model)
    artifacts = []
    if source.suffix == ".csv":
        preds = read_predictions(source)
    else:
        model = load_checkpoint(source)
        check_compatible(model, data)
        preds = predict_labels(model, data)
        if preds.ndim == 1:
            report = score_consensus(preds, data)
            path = out / "consensus.json"
            path.write_text(json.dumps({"accuracy": report.accuracy, "f1": report.f1}, indent=2, sort_keys=True) + "\n")
            write_manifest(out / "manifest.json", "eval", None, [source, Path(args.data)], [path])
            print(f"consensus accuracy {report.accuracy:.4f} f1 {report.f1:.4f} (single-output model, no DIC)")
            return EXIT_OK
        artifacts.append(out / "predictions.csv")
        write_predictions(preds, artifacts[-1])
    if preds.shape != data.labels.shape:
        raise UsageError(f"predictions have shape {preds.shape}, dataset labels {data.labels.shape}")
    if np.any(preds == MISSING) or np.any(preds >= data.num_classes) or np.any(preds < 0):
        raise UsageError(f"predictions must lie in [0, {data.num_classes})")
    report = evaluate_predictions(preds, data)
    files = {
        "report.csv": report.to_csv(),
        "report.json": report.to_json() + "\n",
        "M.csv": report.M.to_csv(),
        "Mprime.csv": report.Mprime.to_csv(),
        "dic.txt": f"{report.dic!r}\n",
    }
    for name, text in files.items():
        (out / name).write_text(text)
        artifacts.append(out / name)
    write_manifest(out / "manifest.json", "eval", None, [source, Path(args.data)], artifacts)
    print(f"avg accuracy {report.avg_accuracy:.4f} CoPr {report.copr_accuracy:.4f}")
    print(f"DIC {report.dic:.6f}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    spec = replace(cfg.experiment(), sparsity_rates=(0.0,))
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(spec, jobs=cfg["jobs"])
    paths = _write_report(report, out, "report")
    by_key = {(c.variant, c.seed): c for c in report.cells}
    if "full" in spec.variants and "pooledPremv" in spec.variants:
        rows = ["seed,R_pre,R_post,post_ge_pre"]
        for seed in spec.seeds:
            pre = by_key[("pooledPremv", seed)].consensus_accuracy
            post = by_key[("full", seed)].consensus_accuracy
            rows.append(f"{seed},{pre!r},{post!r},{int(post >= pre)}")
        paths.append(out / "pre_post.csv")
        paths[-1].write_text("\n".join(rows) + "\n")
    write_manifest(out / "manifest.json", "ablate", cfg, [args.config], paths)
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    report = sparse_sweep(cfg.experiment(), jobs=cfg["jobs"])
    paths = _write_report(report, out, "sweep")
    write_manifest(out / "manifest.json", "sweep", cfg, [args.config], paths)
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_attn(args, cfg: Optional[RunConfig]) -> int:
    model = load_checkpoint(args.model)
    data = load_dataset(args.data)
    check_compatible(model, data)
    out = Path(args.outdir)
    paths = dump_attention(model, data, out, limit=args.limit)
    if data.profiles is not None:
        rho = attention_fidelity(model, data)
        fid = out / "fidelity.csv"
        fid.write_text("annotator,spearman\n" + "".join(f"A_{k + 1},{v!r}\n" for k, v in enumerate(rho)))
        paths.append(fid)
        print(f"mean attention/focus Spearman {float(np.mean(rho)):.4f}")
    write_manifest(out / "manifest.json", "attn", None, [Path(args.model), Path(args.data)], paths)
    print(f"wrote {len(paths)} files to {out}")
    return EXIT_OK


def cmd_bench(args, cfg: Optional[RunConfig]) -> int:
    model = load_checkpoint(args.model)
    data = load_dataset(args.data)
    check_compatible(model, data)
    count, seconds = efficiency_report(model, data, repetitions=args.repetitions)
    print(f"parameterCount {count}")
    print(f"meanSecondsPerSample {seconds:.6e}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qumatl", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset and print its consistency matrix")
    p.add_argument("config")
    p.add_argument("out")
    p.set_defaults(func=cmd_generate, takes_config=True)

    p = sub.add_parser("train", help="train one variant on a dataset file")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("out", help="checkpoint path; history and manifest are written beside it")
    p.set_defaults(func=cmd_train, takes_config=True)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction CSV on a dataset")
    p.add_argument("model", help="checkpoint, or a .csv of per-annotator predictions")
    p.add_argument("data")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_eval, takes_config=False)

    p = sub.add_parser("ablate", help="train every configured variant for every seed")
    p.add_argument("config")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_ablate, takes_config=True)

    p = sub.add_parser("sweep", help="retrain under label removal and report relative drops")
    p.add_argument("config")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_sweep, takes_config=True)

    p = sub.add_parser("attn", help="dump attention CSVs and PGM heatmaps")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("outdir")
    p.add_argument("--limit", type=int, default=16, help="number of samples to dump")
    p.set_defaults(func=cmd_attn, takes_config=False)

    p = sub.add_parser("bench", help="parameter count and mean per-sample inference time")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--repetitions", type=int, default=3)
    p.set_defaults(func=cmd_bench, takes_config=False)
    return parser


def _dispatch(argv: Optional[Sequence[str]]) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if extra and not args.takes_config:
        raise UsageError(f"{args.command} takes no --key=value overrides: {' '.join(extra)}")
    overrides = dict(parse_override(e) for e in extra)
    cfg = load_config(args.config, overrides) if args.takes_config else None
    return args.func(args, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    started = time.perf_counter()
    try:
        code = _dispatch(argv)
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    log.debug("finished in %.2f s", time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
