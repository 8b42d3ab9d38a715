"""Synthetic multi-annotator datasets with planted tendencies, persistence, splits, sparsity.

Each annotator looks at a sample through a focus distribution over its tokens
and labels it with a linear rule on the focus-weighted token average. Groups of
annotators share a focus vector (and, up to jitter, a decision rule), which
plants the inter-annotator correlations the model is meant to recover.

Labels are stored as integer arrays with ``MISSING`` (-1) for absent entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .seeding import rng_for

MISSING = -1
FORMAT_VERSION = 1
FOCUS_CONCENTRATION = 8.0
BACKGROUND_CONCENTRATION = 0.2


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


class HeaderError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


class DimensionError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class StarvedAnnotatorError(DatasetError):
    """An annotator has no labels left, so its head cannot be trained."""


@dataclass
class AnnotatorProfile:
    focus: np.ndarray  # (numTokens,), sums to 1
    decision_weights: np.ndarray  # (C, rawDim)
    bias_shift: np.ndarray  # (C,)
    noise_rate: float

    def __post_init__(self):
        if abs(float(np.sum(self.focus)) - 1.0) > 1e-9 or np.any(self.focus < 0):
            raise DatasetError("focus must be a non-negative vector summing to 1")
        if not 0.0 <= self.noise_rate < 1.0:
            raise DatasetError(f"noise_rate {self.noise_rate} outside [0, 1)")

    def clean_labels(self, tokens: np.ndarray) -> np.ndarray:
        """Noise-free labels for tokens of shape (N, numTokens, rawDim)."""
        pooled = np.einsum("t,ntr->nr", self.focus, tokens)
        scores = pooled @ self.decision_weights.T + self.bias_shift
        return np.argmax(scores, axis=1)

    def __eq__(self, other):
        if not isinstance(other, AnnotatorProfile):
            return NotImplemented
        return (
            np.array_equal(self.focus, other.focus)
            and np.array_equal(self.decision_weights, other.decision_weights)
            and np.array_equal(self.bias_shift, other.bias_shift)
            and self.noise_rate == other.noise_rate
        )


@dataclass
class Sample:
    raw_tokens: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    tokens: np.ndarray  # (N, numTokens, rawDim) float64
    labels: np.ndarray  # (N, n) int64, MISSING where absent
    num_classes: int
    profiles: Optional[list[AnnotatorProfile]] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 3 or self.labels.ndim != 2:
            raise DatasetError("tokens must be (N, T, rawDim) and labels (N, n)")
        if self.tokens.shape[0] != self.labels.shape[0]:
            raise DatasetError("tokens and labels disagree on sample count")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be at least 2")
        bad = (self.labels != MISSING) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            i = int(np.argwhere(bad)[0][0])
            raise LabelRangeError(f"sample {i}: label outside [0, {self.num_classes})")
        if self.profiles is not None and len(self.profiles) != self.num_annotators:
            raise DatasetError("one profile per annotator required")

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i) -> Sample:
        return Sample(self.tokens[i], self.labels[i])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
            and self.profiles == other.profiles
        )

    @property
    def num_annotators(self) -> int:
        return self.labels.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def raw_dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def observed(self) -> np.ndarray:
        return self.labels != MISSING

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.tokens[indices], self.labels[indices], self.num_classes, self.profiles)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.tokens, labels, self.num_classes, self.profiles)


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic-data knobs.

    ``position_scale`` > 0 appends ``num_tokens`` one-hot position channels
    (scaled) to the ``content_dim`` Gaussian channels, so token identity is
    visible to attention the way positional embeddings make it visible in
    patch features. Decision rules ignore those channels.
    ``weight_jitter`` perturbs each member's decision rule away from its
    group's shared rule; 0 makes group members label identically.
    """

    num_samples: int = 2000
    num_annotators: int = 5
    num_classes: int = 4
    num_tokens: int = 8
    content_dim: int = 4
    correlation_groups: Optional[tuple[tuple[int, ...], ...]] = None
    noise_rate: float = 0.1
    seed: int = 0
    position_scale: float = 1.0
    weight_jitter: float = 0.3
    bias_scale: float = 0.1

    @property
    def raw_dim(self) -> int:
        return self.content_dim + (self.num_tokens if self.position_scale > 0 else 0)

    @property
    def groups(self) -> tuple[tuple[int, ...], ...]:
        if self.correlation_groups is None:
            return tuple((k,) for k in range(self.num_annotators))
        return tuple(tuple(int(k) for k in g) for g in self.correlation_groups)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError("num_classes must be at least 2")
        for name in ("num_samples", "num_annotators", "num_tokens", "content_dim"):
            if getattr(self, name) < 1:
                raise DatasetError(f"{name} must be positive")
        members = sorted(k for g in self.groups for k in g)
        if members != list(range(self.num_annotators)) or any(len(g) == 0 for g in self.groups):
            raise DatasetError(
                f"correlation_groups {self.groups} must partition annotators 0..{self.num_annotators - 1}"
            )
        if len(self.groups) > self.num_tokens:
            raise DatasetError("more correlation groups than tokens to focus on")
        if not 0.0 <= self.noise_rate < 1.0:
            raise DatasetError("noise_rate must be in [0, 1)")


def even_groups(num_annotators: int, num_groups: int) -> tuple[tuple[int, ...], ...]:
    """Contiguous, near-equal partition of annotator indices."""
    return tuple(tuple(int(k) for k in part) for part in np.array_split(np.arange(num_annotators), num_groups))


def focus_windows(num_tokens: int, num_groups: int) -> list[np.ndarray]:
    return np.array_split(np.arange(num_tokens), num_groups)


def _class_directions(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit class directions, mutually orthogonal when ``num_classes <= dim``.

    Orthogonal directions give every class an equal share of an isotropic
    input, so no class is starved of training examples.
    """
    g = rng.normal(size=(max(dim, num_classes), max(dim, num_classes)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if num_classes <= dim:
        return q[:num_classes, :dim]
    rows = rng.normal(size=(num_classes, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_profiles(cfg: GeneratorConfig) -> list[AnnotatorProfile]:
    cfg.validate()
    groups = cfg.groups
    windows = focus_windows(cfg.num_tokens, len(groups))
    profiles: list[Optional[AnnotatorProfile]] = [None] * cfg.num_annotators
    for g, (members, window) in enumerate(zip(groups, windows)):
        rng = rng_for(cfg.seed, f"profile/group{g}")
        alpha = np.full(cfg.num_tokens, BACKGROUND_CONCENTRATION)
        alpha[window] = FOCUS_CONCENTRATION
        focus = rng.dirichlet(alpha)
        focus = focus / focus.sum()
        weights = np.zeros((cfg.num_classes, cfg.raw_dim))
        weights[:, : cfg.content_dim] = _class_directions(cfg.num_classes, cfg.content_dim, rng)
        bias = rng.normal(0.0, cfg.bias_scale, size=cfg.num_classes)
        for k in members:
            member_rng = rng_for(cfg.seed, f"profile/annotator{k}")
            w = weights.copy()
            jitter = member_rng.normal(size=(cfg.num_classes, cfg.content_dim)) / np.sqrt(cfg.content_dim)
            w[:, : cfg.content_dim] += cfg.weight_jitter * jitter
            b = bias + cfg.weight_jitter * cfg.bias_scale * member_rng.normal(size=cfg.num_classes)
            profiles[k] = AnnotatorProfile(focus.copy(), w, b, cfg.noise_rate)
    return profiles


def sample_tokens(cfg: GeneratorConfig, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    content = rng.normal(size=(num_samples, cfg.num_tokens, cfg.content_dim))
    if cfg.position_scale <= 0:
        return content
    codes = np.broadcast_to(cfg.position_scale * np.eye(cfg.num_tokens), (num_samples, cfg.num_tokens, cfg.num_tokens))
    return np.concatenate([content, codes], axis=2)


def apply_label_noise(clean: np.ndarray, noise_rate: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """With probability ``noise_rate`` swap each label for a uniform different class."""
    flip = rng.random(clean.shape) < noise_rate
    shift = rng.integers(1, num_classes, size=clean.shape)
    return np.where(flip, (clean + shift) % num_classes, clean)


def generate_synthetic(cfg: GeneratorConfig) -> Dataset:
    profiles = make_profiles(cfg)
    tokens = sample_tokens(cfg, cfg.num_samples, rng_for(cfg.seed, "tokens"))
    noise_rng = rng_for(cfg.seed, "noise")
    labels = np.stack(
        [apply_label_noise(p.clean_labels(tokens), p.noise_rate, cfg.num_classes, noise_rng) for p in profiles],
        axis=1,
    )
    return Dataset(tokens, labels, cfg.num_classes, profiles)


# ------------------------------------------------------------- persistence


def _floats(values) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(values)) + "]"


def _ints(values) -> str:
    return "[" + ",".join(str(int(v)) for v in np.ravel(values)) + "]"


def dumps_dataset(d: Dataset) -> str:
    header = {
        "version": FORMAT_VERSION,
        "numSamples": len(d),
        "n": d.num_annotators,
        "C": d.num_classes,
        "numTokens": d.num_tokens,
        "rawDim": d.raw_dim,
        "hasProfiles": d.profiles is not None,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for k, p in enumerate(d.profiles or []):
        lines.append(
            f'{{"profile":{k},"focus":{_floats(p.focus)},"decisionWeights":{_floats(p.decision_weights)},'
            f'"biasShift":{_floats(p.bias_shift)},"noiseRate":{format(p.noise_rate, ".17g")}}}'
        )
    for i in range(len(d)):
        lines.append(f'{{"tokens":{_floats(d.tokens[i])},"labels":{_ints(d.labels[i])}}}')
    return "\n".join(lines) + "\n"


def save_dataset(d: Dataset, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_dataset(d))


def _record(line: str, index: int, kind: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"record {index}: malformed {kind} ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise DatasetFormatError(f"record {index}: {kind} is not an object")
    return rec


def loads_dataset(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise HeaderError("record 0: empty file, header missing")
    try:
        header = json.loads(lines[0])
        n, c, t, r = (int(header[k]) for k in ("n", "C", "numTokens", "rawDim"))
        count = int(header["numSamples"])
        has_profiles = bool(header["hasProfiles"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"record 0: malformed header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise HeaderError(f"record 0: unsupported version {header.get('version')!r}")
    if min(n, t, r) < 1 or c < 2 or count < 0:
        raise HeaderError("record 0: header dimensions out of range")

    pos = 1
    profiles = None
    if has_profiles:
        profiles = []
        for k in range(n):
            if pos >= len(lines):
                raise TruncatedError(f"record {pos}: file ends before profile {k}")
            rec = _record(lines[pos], pos, "profile")
            try:
                focus = np.array(rec["focus"], dtype=np.float64)
                weights = np.array(rec["decisionWeights"], dtype=np.float64)
                bias = np.array(rec["biasShift"], dtype=np.float64)
                noise = float(rec["noiseRate"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"record {pos}: malformed profile ({exc})") from exc
            if rec.get("profile") != k or focus.shape != (t,) or weights.size != c * r or bias.shape != (c,):
                raise DimensionError(f"record {pos}: profile {k} dimensions disagree with header")
            profiles.append(AnnotatorProfile(focus, weights.reshape(c, r), bias, noise))
            pos += 1

    tokens = np.empty((count, t, r))
    labels = np.empty((count, n), dtype=np.int64)
    for i in range(count):
        if pos >= len(lines):
            raise TruncatedError(f"record {pos}: file ends at sample {i} of {count}")
        rec = _record(lines[pos], pos, "sample")
        try:
            tok = np.array(rec["tokens"], dtype=np.float64)
            lab = np.array(rec["labels"], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"record {pos}: malformed sample ({exc})") from exc
        if tok.size != t * r or lab.shape != (n,):
            raise DimensionError(
                f"record {pos}: sample {i} has {tok.size} token values and {lab.size} labels, "
                f"expected {t * r} and {n}"
            )
        if np.any((lab != MISSING) & ((lab < 0) | (lab >= c))):
            raise LabelRangeError(f"record {pos}: sample {i} label outside [0, {c}) and not {MISSING}")
        tokens[i] = tok.reshape(t, r)
        labels[i] = lab
        pos += 1
    if pos != len(lines):
        raise DatasetFormatError(f"record {pos}: {len(lines) - pos} trailing records beyond numSamples")
    return Dataset(tokens, labels, c, profiles)


def load_dataset(path: Union[str, Path]) -> Dataset:
    return loads_dataset(Path(path).read_text())


# ------------------------------------------------------ splits and sparsity


def split(d: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then contiguous train/val/test cut (floor, remainder to test)."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions {fractions} must be three positive reals summing to 1")
    order = rng_for(seed, "split").permutation(len(d))
    n_train = int(np.floor(fractions[0] * len(d) + 1e-9))
    n_val = int(np.floor(fractions[1] * len(d) + 1e-9))
    cuts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    if any(len(c) == 0 for c in cuts):
        raise DatasetError(f"split sizes {[len(c) for c in cuts]} leave an empty partition")
    return tuple(d.subset(c) for c in cuts)


def check_annotator_coverage(labels: np.ndarray) -> None:
    counts = (labels != MISSING).sum(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise StarvedAnnotatorError(f"annotators {empty.tolist()} have no labels")


def apply_sparsity(d: Dataset, rate: float, seed: int) -> Dataset:
    """Mask exactly floor(rate * observed) labels, uniformly over (sample, annotator) pairs."""
    if not 0.0 <= rate < 1.0:
        raise DatasetError(f"sparsity rate {rate} outside [0, 1)")
    observed = np.flatnonzero(d.observed.ravel())
    k = int(np.floor(rate * observed.size + 1e-9))
    if k == 0:
        return d.with_labels(d.labels.copy())
    drop = rng_for(seed, "sparsity").choice(observed, size=k, replace=False)
    labels = d.labels.copy().ravel()
    labels[drop] = MISSING
    labels = labels.reshape(d.labels.shape)
    check_annotator_coverage(labels)
    return d.with_labels(labels)


def majority_label(labels: Sequence[int], num_classes: Optional[int] = None) -> int:
    """Modal non-missing label; ties go to the smallest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    present = labels[labels != MISSING]
    if present.size == 0:
        raise DatasetError("all labels missing; no majority")
    return int(np.argmax(np.bincount(present, minlength=num_classes or 0)))


def majority_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Row-wise :func:`majority_label`; rows with no labels give MISSING."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.zeros((labels.shape[0], num_classes), dtype=np.int64)
    for c in range(num_classes):
        counts[:, c] = (labels == c).sum(axis=1)
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = MISSING
    return out
