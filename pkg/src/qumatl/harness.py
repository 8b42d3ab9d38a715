"""Seeded experiment cells: ablation variants, Pre-mv vs Post-mv, sparsity sweeps,
attention fidelity, efficiency, and attention dumps.

Every cell derives all of its randomness from its own seed, so a cell's row is
the same whether it runs alone or inside a larger sweep.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, GeneratorConfig, apply_sparsity, generate_synthetic, majority_labels, split
from .metrics import EvalReport, accuracy, evaluate_predictions, macro_f1
from .model import VARIANTS, ModelConfig, QumatlModel, count_parameters, forward
from .train import TrainConfig, TrainHistory, predict_labels, train

Splits = tuple[Dataset, Dataset, Dataset]


@dataclass(frozen=True)
class ExperimentSpec:
    generator: GeneratorConfig
    train: TrainConfig
    variants: tuple[str, ...] = ("full",)
    sparsity_rates: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    hidden_dim: int = 16
    num_heads: int = 2
    ffn_dim: int = 32
    num_blocks: int = 1
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if not self.variants or not self.seeds:
            raise ValueError("variants and seeds must be non-empty")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        if any(not 0.0 <= r < 1.0 for r in self.sparsity_rates):
            raise ValueError("sparsity rates must be in [0, 1)")

    def model_config(self, seed: int) -> ModelConfig:
        g = self.generator
        return ModelConfig(
            num_annotators=g.num_annotators,
            num_classes=g.num_classes,
            num_tokens=g.num_tokens,
            raw_dim=g.raw_dim,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            seed=seed,
            num_blocks=self.num_blocks,
        )

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        return replace(self.train, variant=variant, seed=seed)


@dataclass
class ConsensusReport:
    """Pre-mv result: one consensus prediction per sample, scored against L_mv."""

    accuracy: float
    f1: float


@dataclass
class CellResult:
    variant: str
    seed: int
    rate: float
    report: Union[EvalReport, ConsensusReport]
    history: TrainHistory
    seconds: float
    parameter_count: int
    model: Optional[QumatlModel] = field(default=None, repr=False)

    @property
    def avg_accuracy(self) -> float:
        if isinstance(self.report, ConsensusReport):
            return self.report.accuracy
        return self.report.avg_accuracy

    @property
    def consensus_accuracy(self) -> float:
        """Accuracy of the single consensus answer against the majority label."""
        if isinstance(self.report, ConsensusReport):
            return self.report.accuracy
        return self.report.copr_accuracy

    def row(self) -> dict:
        r = self.report
        per_annotator = isinstance(r, EvalReport)
        return {
            "variant": self.variant,
            "seed": self.seed,
            "rate": self.rate,
            "avg_acc": self.avg_accuracy,
            "avg_f1": r.avg_f1 if per_annotator else r.f1,
            "copr_acc": self.consensus_accuracy,
            "copr_f1": r.copr_f1 if per_annotator else r.f1,
            "dic": r.dic if per_annotator else math.nan,
            "best_epoch": self.history.best_epoch,
            "epochs": len(self.history.epochs),
            "best_val_loss": self.history.best_val_loss,
            "params": self.parameter_count,
        }


def prepare_splits(spec: ExperimentSpec, seed: int) -> Splits:
    data = generate_synthetic(replace(spec.generator, seed=seed))
    return split(data, spec.fractions, seed)


def score_consensus(pred: np.ndarray, test: Dataset) -> ConsensusReport:
    target = majority_labels(test.labels, test.num_classes)
    return ConsensusReport(accuracy(pred, target), macro_f1(pred, target, test.num_classes))


def run_variant(
    variant: str,
    splits: Splits,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    rate: float = 0.0,
    keep_model: bool = False,
) -> CellResult:
    """Train ``variant`` on the train split and score it on the test split.

    ``pooledPremv`` trains on per-sample majority labels and reports only a
    consensus accuracy (R_pre).
    """
    train_set, val_set, test_set = splits
    train_cfg = replace(train_cfg, variant=variant)
    model = QumatlModel(model_cfg, variant)
    start = time.perf_counter()
    best, history = train(model, train_set, val_set, train_cfg)
    seconds = time.perf_counter() - start
    preds = predict_labels(best, test_set)
    if variant == "pooledPremv":
        report: Union[EvalReport, ConsensusReport] = score_consensus(preds, test_set)
    else:
        report = evaluate_predictions(preds, test_set)
    return CellResult(
        variant, train_cfg.seed, rate, report, history, seconds, count_parameters(best), best if keep_model else None
    )


def compare_pre_post(
    splits: Splits,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    full: Optional[CellResult] = None,
    pooled: Optional[CellResult] = None,
) -> tuple[float, float]:
    """(R_pre, R_post) accuracies against the test majority label L_mv.

    Already-trained cells may be passed in to avoid retraining.
    """
    full = full or run_variant("full", splits, train_cfg, model_cfg)
    pooled = pooled or run_variant("pooledPremv", splits, train_cfg, model_cfg)
    return pooled.consensus_accuracy, full.consensus_accuracy


@dataclass
class ExperimentReport:
    cells: list[CellResult]
    relative_drops: dict[tuple[str, int, float], float] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for c in self.cells:
            row = c.row()
            if self.relative_drops:
                row["relative_drop"] = self.relative_drops.get((c.variant, c.seed, c.rate), math.nan)
            out.append(row)
        return out

    def aggregates(self) -> list[dict]:
        """Mean and population std over seeds, per (variant, rate)."""
        groups: dict[tuple[str, float], list[dict]] = {}
        for row in self.rows():
            groups.setdefault((row["variant"], row["rate"]), []).append(row)
        out = []
        for (variant, rate), rows in groups.items():
            agg = {"variant": variant, "rate": rate, "seeds": len(rows)}
            for key in ("avg_acc", "copr_acc", "dic", "relative_drop"):
                if key in rows[0]:
                    vals = np.array([r[key] for r in rows], dtype=float)
                    agg[f"{key}_mean"] = float(np.mean(vals))
                    agg[f"{key}_std"] = float(np.std(vals))
            out.append(agg)
        return out

    def to_csv(self) -> str:
        return _csv(self.rows())

    def timings_csv(self) -> str:
        """Wall-clock seconds per cell; kept apart so reports stay reproducible."""
        return _csv([{"variant": c.variant, "seed": c.seed, "rate": c.rate, "seconds": c.seconds} for c in self.cells])

    def aggregates_csv(self) -> str:
        return _csv(self.aggregates())

    def summary(self) -> str:
        lines = []
        for agg in self.aggregates():
            text = (
                f"{agg['variant']:<12} rate={agg['rate']:.2f} seeds={agg['seeds']} "
                f"avg_acc={agg['avg_acc_mean']:.4f}±{agg['avg_acc_std']:.4f} "
                f"copr={agg['copr_acc_mean']:.4f}"
            )
            if not math.isnan(agg["dic_mean"]):
                text += f" dic={agg['dic_mean']:.4f}"
            if "relative_drop_mean" in agg:
                text += f" rel_drop={agg['relative_drop_mean']:.4f}"
            lines.append(text)
        return "\n".join(lines) + "\n"


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def _run_cell(args) -> CellResult:
    spec, seed, rate, variant, keep_model = args
    train_set, val_set, test_set = prepare_splits(spec, seed)
    if rate > 0:
        train_set = apply_sparsity(train_set, rate, seed)
    return run_variant(
        variant,
        (train_set, val_set, test_set),
        spec.train_config(variant, seed),
        spec.model_config(seed),
        rate,
        keep_model,
    )


def run_experiment(spec: ExperimentSpec, keep_models: bool = False, jobs: int = 1) -> ExperimentReport:
    """Every (seed, rate, variant) cell; sparsity only touches the train split.

    With ``jobs > 1`` cells run in worker processes; rows keep their order.
    """
    cells = [
        (spec, seed, rate, variant, keep_models)
        for seed in spec.seeds
        for rate in spec.sparsity_rates
        for variant in spec.variants
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return ExperimentReport(list(pool.map(_run_cell, cells)))
    return ExperimentReport([_run_cell(c) for c in cells])


def sparse_sweep(spec: ExperimentSpec, rates: Optional[Sequence[float]] = None, jobs: int = 1) -> ExperimentReport:
    """Retrain at each removal rate; drop is relative to the same variant/seed at rate 0."""
    rates = tuple(rates if rates is not None else spec.sparsity_rates)
    if 0.0 not in rates:
        rates = (0.0,) + rates
    report = run_experiment(replace(spec, sparsity_rates=rates), jobs=jobs)
    baseline = {(c.variant, c.seed): c.avg_accuracy for c in report.cells if c.rate == 0.0}
    for c in report.cells:
        ref = baseline[(c.variant, c.seed)]
        report.relative_drops[(c.variant, c.seed, c.rate)] = (ref - c.avg_accuracy) / ref
    return report


# ------------------------------------------------------- attention analysis


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties; 0 if either side is constant."""
    ra, rb = rankdata(a), rankdata(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    den = math.sqrt(float(np.sum(ra * ra)) * float(np.sum(rb * rb)))
    if den == 0.0:
        return 0.0
    return float(np.sum(ra * rb) / den)


def mean_attention(model: QumatlModel, dataset: Dataset) -> np.ndarray:
    att = forward(model, dataset.tokens).attention
    if att is None:
        raise ValueError(f"variant {model.variant!r} has no cross-attention")
    return att.mean(axis=0)


def attention_fidelity(model: QumatlModel, dataset: Dataset) -> np.ndarray:
    """Per-annotator Spearman correlation between planted focus and mean attention."""
    if dataset.profiles is None:
        raise ValueError("dataset has no planted profiles")
    att = mean_attention(model, dataset)
    return np.array([spearman(att[k], p.focus) for k, p in enumerate(dataset.profiles)])


def efficiency_report(model: QumatlModel, dataset: Dataset, repetitions: int = 3) -> tuple[int, float]:
    """(trainable parameter count, mean seconds per single-sample forward)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    forward(model, dataset.tokens[0])  # warmup, not timed
    start = time.perf_counter()
    for _ in range(repetitions):
        for i in range(len(dataset)):
            forward(model, dataset.tokens[i])
    elapsed = time.perf_counter() - start
    return count_parameters(model), elapsed / (repetitions * len(dataset))


def heatmap_layout(num_tokens: int) -> tuple[int, int]:
    """(width, height): a square grid for perfect squares, else one row."""
    side = math.isqrt(num_tokens)
    return (side, side) if side * side == num_tokens else (num_tokens, 1)


def pgm_bytes(row: np.ndarray) -> bytes:
    """8-bit binary PGM of one attention row, min-max scaled."""
    lo, hi = float(np.min(row)), float(np.max(row))
    scaled = np.zeros(row.shape) if hi == lo else (row - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    width, height = heatmap_layout(row.size)
    return f"P5\n{width} {height}\n255\n".encode() + pixels.tobytes()


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, dims, maxval, pixels = buf.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def dump_attention(model: QumatlModel, dataset: Dataset, path: Union[str, Path], limit: Optional[int] = None) -> list[Path]:
    """Per sample: ``sample_<i>.csv`` (n x numTokens) and one PGM per annotator."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    count = len(dataset) if limit is None else min(limit, len(dataset))
    att = forward(model, dataset.tokens[:count]).attention
    if att is None:
        raise ValueError(f"variant {model.variant!r} has no cross-attention")
    written = []
    for i in range(count):
        csv_path = out / f"sample_{i:05d}.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["annotator"] + [f"t{t}" for t in range(att.shape[-1])])
        for k, row in enumerate(att[i]):
            writer.writerow([f"A_{k + 1}"] + [repr(float(v)) for v in row])
        csv_path.write_text(buf.getvalue())
        written.append(csv_path)
        for k, row in enumerate(att[i]):
            pgm_path = out / f"sample_{i:05d}_A{k + 1}.pgm"
            pgm_path.write_bytes(pgm_bytes(row))
            written.append(pgm_path)
    return written


def read_attention_csv(path: Union[str, Path]) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])
