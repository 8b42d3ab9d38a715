"""Annotator-query network: frozen encoder stub, one Q-Former block, per-annotator heads.

One learnable query row per annotator. The block runs, with pre-norm
residuals, self-attention over the query rows, cross-attention from the
queries onto the encoded tokens, and a feed-forward layer. Each output row
feeds its own MLP classifier.

The ablations live here too:

* ``unifiedHead``  one classifier shared by every annotator row
* ``noSelfAttn``   the self-attention sublayer is dropped
* ``pooledPremv``  query outputs are averaged into a single consensus head
* ``base``         no queries at all; mean-pooled tokens go straight to the heads
"""

from __future__ import annotations

import copy
import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tape
from .seeding import rng_for

VARIANTS = ("full", "base", "unifiedHead", "noSelfAttn", "pooledPremv")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_annotators: int
    num_classes: int
    num_tokens: int
    raw_dim: int
    hidden_dim: int = 48
    num_heads: int = 12
    ffn_dim: int = 96
    seed: int = 0
    num_blocks: int = 1

    def __post_init__(self):
        for name in ("num_annotators", "num_tokens", "raw_dim", "hidden_dim", "num_heads", "ffn_dim", "num_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class EncoderStub:
    """Frozen linear token projection standing in for a pretrained encoder."""

    projection: np.ndarray

    frozen = True

    @classmethod
    def create(cls, cfg: ModelConfig) -> "EncoderStub":
        rng = rng_for(cfg.seed, "encoder")
        proj = rng.normal(0.0, 1.0 / np.sqrt(cfg.raw_dim), size=(cfg.raw_dim, cfg.hidden_dim))
        proj.flags.writeable = False
        return cls(proj)


@dataclass
class PredictionSet:
    probs: np.ndarray  # (..., n, C) or (..., C) for pooledPremv
    attention: Optional[np.ndarray]  # (..., n, numTokens), head-averaged


class QumatlModel:
    def __init__(self, config: ModelConfig, variant: str = "full", params=None, encoder=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.config = config
        self.variant = variant
        self.encoder = encoder if encoder is not None else EncoderStub.create(config)
        self.params: dict[str, np.ndarray] = params if params is not None else init_params(config, variant)

    def copy(self) -> "QumatlModel":
        return QumatlModel(
            self.config,
            self.variant,
            {k: v.copy() for k, v in self.params.items()},
            self.encoder,
        )

    def __repr__(self):
        return f"QumatlModel({self.variant}, {self.config}, params={count_parameters(self)})"


def _param_shapes(cfg: ModelConfig, variant: str) -> dict[str, tuple]:
    n, d, c, f = cfg.num_annotators, cfg.hidden_dim, cfg.num_classes, cfg.ffn_dim
    shapes: dict[str, tuple] = {}
    if variant != "base":
        shapes["queries"] = (n, d)
        sublayers = ["ca"] if variant == "noSelfAttn" else ["sa", "ca"]
        for b in range(cfg.num_blocks):
            pre = _block_prefix(b)
            for s in sublayers:
                shapes[f"{pre}{s}_ln_g"] = (d,)
                shapes[f"{pre}{s}_ln_b"] = (d,)
                for w in ("wq", "wk", "wv", "wo"):
                    shapes[f"{pre}{s}_{w}"] = (d, d)
            shapes.update({
                f"{pre}ffn_ln_g": (d,), f"{pre}ffn_ln_b": (d,),
                f"{pre}ffn_w1": (d, f), f"{pre}ffn_b1": (f,),
                f"{pre}ffn_w2": (f, d), f"{pre}ffn_b2": (d,),
            })
        shapes.update(out_ln_g=(d,), out_ln_b=(d,))
    if variant in ("unifiedHead", "pooledPremv"):
        shapes.update(head_w1=(d, d), head_b1=(d,), head_w2=(d, c), head_b2=(c,))
    else:
        shapes.update(head_w1=(n, d, d), head_b1=(n, d), head_w2=(n, d, c), head_b2=(n, c))
    return shapes


def init_params(cfg: ModelConfig, variant: str = "full") -> dict[str, np.ndarray]:
    """Weights and queries ~ N(0, 0.02^2), biases 0, norm gains 1.

    Each tensor draws from its own named stream, so tensors shared between
    variants start from identical values under the same seed.
    """
    params = {}
    for name, shape in _param_shapes(cfg, variant).items():
        if name.endswith("_ln_g"):
            params[name] = np.ones(shape)
        elif re.search(r"_b\d?$", name):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng_for(cfg.seed, f"param/{name}").normal(0.0, INIT_STD, size=shape)
    return params


def count_parameters(model: QumatlModel) -> int:
    """Trainable scalars; the frozen encoder is excluded."""
    return int(sum(v.size for v in model.params.values()))


# ------------------------------------------------------------------ forward


def encode(raw_tokens: np.ndarray, encoder: EncoderStub) -> np.ndarray:
    raw_tokens = np.asarray(raw_tokens, dtype=np.float64)
    if raw_tokens.shape[-1] != encoder.projection.shape[0]:
        raise ShapeError(
            f"raw token width {raw_tokens.shape[-1]} != encoder raw_dim {encoder.projection.shape[0]}"
        )
    return raw_tokens @ encoder.projection


def _split_heads(x, heads: int):
    shape = nx.value_of(x).shape
    x = nx.reshape(x, shape[:-1] + (heads, shape[-1] // heads))
    nd = len(shape) + 1
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return nx.transpose(x, axes)


def _merge_heads(x):
    shape = nx.value_of(x).shape
    axes = list(range(len(shape)))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = nx.transpose(x, axes)
    return nx.reshape(x, shape[:-3] + (shape[-2], shape[-3] * shape[-1]))


def multi_head_attention(x_q, x_kv, wq, wk, wv, wo, heads: int):
    """Scaled dot-product attention; returns (output, weights[..., heads, Lq, Lk])."""
    q = _split_heads(nx.matmul(x_q, wq), heads)
    k = _split_heads(nx.matmul(x_kv, wk), heads)
    v = _split_heads(nx.matmul(x_kv, wv), heads)
    scale = 1.0 / np.sqrt(nx.value_of(q).shape[-1])
    weights = nx.softmax_rows(nx.mul(nx.matmul(q, nx.swap_last(k)), scale))
    out = _merge_heads(nx.matmul(weights, v))
    return nx.matmul(out, wo), nx.value_of(weights)


def qformer_forward(p: dict, features, cfg: ModelConfig, self_attention: bool = True):
    """Annotator features (..., n, d) and cross-attention (..., n, T) averaged over heads and blocks."""
    if nx.value_of(features).shape[-1] != cfg.hidden_dim:
        raise ShapeError(
            f"feature width {nx.value_of(features).shape[-1]} != hidden_dim {cfg.hidden_dim}"
        )
    h = p["queries"]
    maps = []
    for b in range(cfg.num_blocks):
        pre = _block_prefix(b)
        if self_attention:
            x = nx.layer_norm(h, p[pre + "sa_ln_g"], p[pre + "sa_ln_b"])
            sa, _ = multi_head_attention(
                x, x, p[pre + "sa_wq"], p[pre + "sa_wk"], p[pre + "sa_wv"], p[pre + "sa_wo"], cfg.num_heads
            )
            h = nx.add(h, sa)
        x = nx.layer_norm(h, p[pre + "ca_ln_g"], p[pre + "ca_ln_b"])
        ca, weights = multi_head_attention(
            x, features, p[pre + "ca_wq"], p[pre + "ca_wk"], p[pre + "ca_wv"], p[pre + "ca_wo"], cfg.num_heads
        )
        maps.append(weights.mean(axis=-3))
        h = nx.add(h, ca)
        x = nx.layer_norm(h, p[pre + "ffn_ln_g"], p[pre + "ffn_ln_b"])
        x = nx.gelu(nx.add(nx.matmul(x, p[pre + "ffn_w1"]), p[pre + "ffn_b1"]))
        h = nx.add(h, nx.add(nx.matmul(x, p[pre + "ffn_w2"]), p[pre + "ffn_b2"]))
    out = nx.layer_norm(h, p["out_ln_g"], p["out_ln_b"])
    return out, maps[0] if len(maps) == 1 else np.mean(maps, axis=0)


def _block_prefix(block: int) -> str:
    return "" if block == 0 else f"blk{block}_"


def classify(p: dict, feats):
    """Row k of the logits comes from head k applied to feature row k."""
    fv = nx.value_of(feats)
    w1 = nx.value_of(p["head_w1"])
    if w1.ndim == 2:
        return _shared_head(p, feats)
    n, d = fv.shape[-2:]
    if w1.shape[0] != n or w1.shape[1] != d:
        raise ShapeError(f"features {fv.shape} do not match per-annotator heads {w1.shape}")
    c = nx.value_of(p["head_w2"]).shape[-1]
    x = nx.reshape(feats, fv.shape[:-1] + (1, d))
    x = nx.add(nx.matmul(x, p["head_w1"]), nx.reshape(p["head_b1"], (n, 1, d)))
    x = nx.add(nx.matmul(nx.gelu(x), p["head_w2"]), nx.reshape(p["head_b2"], (n, 1, c)))
    return nx.reshape(x, fv.shape[:-1] + (c,))


def _shared_head(p: dict, feats):
    x = nx.gelu(nx.add(nx.matmul(feats, p["head_w1"]), p["head_b1"]))
    return nx.add(nx.matmul(x, p["head_w2"]), p["head_b2"])


def _graph(model: QumatlModel, raw_tokens, p: dict, variant: str):
    cfg = model.config
    f = encode(raw_tokens, model.encoder)
    if variant == "base":
        pooled = f.mean(axis=-2, keepdims=True)  # (..., 1, d)
        shape = pooled.shape[:-2] + (cfg.num_annotators, cfg.hidden_dim)
        logits = classify(p, np.broadcast_to(pooled, shape))
        return nx.softmax_rows(logits), None
    feats, attn = qformer_forward(p, f, cfg, self_attention=variant != "noSelfAttn")
    if variant == "pooledPremv":
        logits = _shared_head(p, nx.mean(feats, axis=-2, keepdims=True))
        shape = nx.value_of(logits).shape
        logits = nx.reshape(logits, shape[:-2] + shape[-1:])
    else:
        logits = classify(p, feats)
    return nx.softmax_rows(logits), attn


def build_graph(model: QumatlModel, raw_tokens, tape: Optional[Tape] = None, variant: Optional[str] = None):
    """Probabilities (a Var when ``tape`` is given) and the attention array."""
    variant = variant or model.variant
    if tape is None:
        p = model.params
    else:
        p = {k: tape.parameter(k, v) for k, v in model.params.items()}
    return _graph(model, raw_tokens, p, variant)


def _predict(model, raw_tokens, variant) -> PredictionSet:
    missing = set(_param_shapes(model.config, variant)) - set(model.params)
    if missing:
        raise ValueError(f"model ({model.variant}) lacks parameters for {variant}: {sorted(missing)}")
    probs, attn = build_graph(model, raw_tokens, None, variant)
    return PredictionSet(np.asarray(probs), attn)


def forward(model: QumatlModel, raw_tokens) -> PredictionSet:
    """Run the model's own variant. Accepts (T, raw) or batched (B, T, raw)."""
    return _predict(model, raw_tokens, model.variant)


def forward_full(model, raw_tokens) -> PredictionSet:
    return _predict(model, raw_tokens, "full")


def forward_unified(model, raw_tokens) -> PredictionSet:
    return _predict(model, raw_tokens, "unifiedHead")


def forward_no_selfattn(model, raw_tokens) -> PredictionSet:
    return _predict(model, raw_tokens, "noSelfAttn")


def forward_pooled(model, raw_tokens) -> PredictionSet:
    return _predict(model, raw_tokens, "pooledPremv")


def forward_base(model, raw_tokens) -> PredictionSet:
    return _predict(model, raw_tokens, "base")


def permute_annotators(model: QumatlModel, perm) -> QumatlModel:
    """Copy of ``model`` with annotator k taking the query and head of ``perm[k]``."""
    perm = np.asarray(perm)
    out = model.copy()
    for name, value in out.params.items():
        if name == "queries" or (name.startswith("head_") and value.ndim == _head_ndim(name) + 1):
            out.params[name] = value[perm].copy()
    return out


def _head_ndim(name: str) -> int:
    return 2 if name in ("head_w1", "head_w2") else 1


# --------------------------------------------------------------- checkpoint

_MAGIC = b"QMTLCKPT"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: QumatlModel, path: Union[str, Path]) -> None:
    """Binary container: magic, JSON header, then named float64 tensors with shape prefixes."""
    header = json.dumps(
        {"version": _VERSION, "variant": model.variant, "config": asdict(model.config)},
        sort_keys=True,
    ).encode()
    tensors = [("encoder.projection", model.encoder.projection)]
    tensors += sorted(model.params.items())
    chunks = [_MAGIC, struct.pack("<II", len(header), len(tensors)), header]
    for name, value in tensors:
        raw_name = name.encode()
        arr = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> QumatlModel:
    buf = Path(path).read_bytes()
    if not buf.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(_MAGIC)
    try:
        header_len, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        header = json.loads(buf[pos : pos + header_len])
        pos += header_len
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if header.get("version") != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    cfg = ModelConfig(**header["config"])
    projection = tensors.pop("encoder.projection")
    projection.flags.writeable = False
    model = QumatlModel(cfg, header["variant"], params=tensors, encoder=EncoderStub(projection))
    expected = _param_shapes(cfg, model.variant)
    got = {k: v.shape for k, v in tensors.items()}
    if got != expected:
        raise CheckpointError(f"{path}: tensors {sorted(got)} do not match {model.variant} layout")
    return model


def tied_heads_copy(model: QumatlModel, shared: dict) -> QumatlModel:
    """Full-variant copy whose per-annotator heads all equal one shared head."""
    out = copy.copy(model)
    out.params = dict(model.params)
    n = model.config.num_annotators
    for name in ("head_w1", "head_b1", "head_w2", "head_b2"):
        out.params[name] = np.repeat(shared[name][None], n, axis=0)
    return out
