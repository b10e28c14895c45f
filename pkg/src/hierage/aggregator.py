"""Augmentation aggregation: a shared stem embeds each view, then either a
Transformer encoder (read out at a learnt class token), a mean over views,
or nothing at all fuses them into one embedding.

All functions accept a single sample (``views`` of shape ``[K, F]``) or a
batch (``[B, K, F]``); the fused embedding is ``[d]`` or ``[B, d]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

AGGREGATIONS = ("encoder", "average-pool", "none")

CHECKPOINT_MAGIC = "HIERAGE-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    input_dim: int = 16
    model_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int | None = None
    dropout_p: float = 0.1
    n_views: int = 10
    aggregation: str = "encoder"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim
        for name in ("input_dim", "model_dim", "num_layers", "num_heads", "ffn_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.n_views < 1:
            raise ValueError("n_views (K) must be at least 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class EncoderParams:
    """Named trainable tensors of the stem, class token and encoder blocks."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: EncoderConfig, rng: np.random.Generator) -> "EncoderParams":
        d, f, h = config.model_dim, config.input_dim, config.ffn_dim
        t = {
            "stem.weight": _xavier(rng, f, d),
            "stem.bias": np.zeros(d),
        }
        if config.aggregation == "encoder":
            t["cls_token"] = rng.normal(0.0, 0.02, size=d)
            for i in range(config.num_layers):
                p = f"layers.{i}."
                for proj in ("query", "key", "value", "output"):
                    t[p + "attn." + proj] = _xavier(rng, d, d)
                t[p + "ln1.gain"] = np.ones(d)
                t[p + "ln1.bias"] = np.zeros(d)
                t[p + "ffn.w1"] = _xavier(rng, d, h)
                t[p + "ffn.b1"] = np.zeros(h)
                t[p + "ffn.w2"] = _xavier(rng, h, d)
                t[p + "ffn.b2"] = np.zeros(d)
                t[p + "ln2.gain"] = np.ones(d)
                t[p + "ln2.bias"] = np.zeros(d)
        return cls({k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def stem_embed(raw, params: EncoderParams) -> Tensor:
    """Affine map ``raw @ W + b`` from raw features to model dimension."""
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    w, b = params["stem.weight"], params["stem.bias"]
    if raw.shape[-1] != w.shape[0]:
        raise ad.ShapeError(f"stem_embed: input dim {raw.shape[-1]} != stem dim {w.shape[0]}")
    if raw.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(raw, (1, -1)), w), (w.shape[1],)) + b
    return ad.matmul(raw, w) + b


def multi_head_attention(x: Tensor, layer: dict[str, Tensor], num_heads: int,
                         dropout_p: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None,
                         return_weights: bool = False):
    """Self-attention over the rows of ``x`` (``[S, d]`` or ``[B, S, d]``).

    No positional information enters, so the map is equivariant under row
    permutations in eval mode.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    b, s, d = x.shape
    if d % num_heads:
        raise ad.ShapeError(f"model dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, s, num_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, layer["attn.query"]))
    k = heads(ad.matmul(x, layer["attn.key"]))
    v = heads(ad.matmul(x, layer["attn.value"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    attended = ad.matmul(ad.dropout(weights, dropout_p, rng, training), v)
    merged = ad.reshape(ad.transpose(attended, (0, 2, 1, 3)), (b, s, d))
    out = ad.matmul(merged, layer["attn.output"])
    if squeeze:
        out = ad.reshape(out, (s, d))
    if return_weights:
        return out, weights.data[0] if squeeze else weights.data
    return out


def encoder_block(x: Tensor, layer: dict[str, Tensor], config: EncoderConfig,
                  training: bool = False, rng=None) -> Tensor:
    # post-norm: sublayer -> residual add -> layer norm
    attn = multi_head_attention(x, layer, config.num_heads, config.dropout_p, training, rng)
    x = ad.layer_norm(x + attn, layer["ln1.gain"], layer["ln1.bias"], config.ln_eps)
    hidden = ad.gelu(ad.matmul(x, layer["ffn.w1"]) + layer["ffn.b1"])
    hidden = ad.dropout(hidden, config.dropout_p, rng, training)
    ffn = ad.matmul(hidden, layer["ffn.w2"]) + layer["ffn.b2"]
    return ad.layer_norm(x + ffn, layer["ln2.gain"], layer["ln2.bias"], config.ln_eps)


def _as_batch(views) -> tuple[Tensor, bool]:
    views = views if isinstance(views, Tensor) else Tensor(views)
    if views.ndim == 2:
        return ad.reshape(views, (1,) + views.shape), True
    if views.ndim != 3:
        raise ad.ShapeError(f"views must be [K, F] or [B, K, F], got {views.shape}")
    return views, False


def encode(views, params: EncoderParams, config: EncoderConfig,
           training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Fuse ``K`` views with the Transformer encoder; returns the class-token row."""
    views, single = _as_batch(views)
    b, k, _ = views.shape
    if k != config.n_views:
        raise ad.ContractError(f"encode expects K={config.n_views} views, got {k}")
    d = config.model_dim
    embedded = stem_embed(views, params)
    cls = ad.reshape(params["cls_token"], (1, 1, d))
    if b > 1:
        cls = ad.matmul(Tensor(np.ones((b, 1, 1))), cls)
    x = ad.concat([cls, embedded], axis=1)
    for i in range(config.num_layers):
        x = encoder_block(x, params.layer(i), config, training, rng)
    fused = x[:, 0, :]
    return fused[0] if single else fused


def average_pool_aggregate(views, params: EncoderParams) -> Tensor:
    """Mean of the stem embeddings over the K views."""
    views, single = _as_batch(views)
    fused = ad.mean(stem_embed(views, params), axis=1)
    return fused[0] if single else fused


def aggregate(views, params: EncoderParams, config: EncoderConfig,
              training: bool = False, rng=None) -> Tensor:
    """Dispatch on ``config.aggregation``; ``"none"`` embeds the first view only."""
    if config.aggregation == "encoder":
        return encode(views, params, config, training, rng)
    if config.aggregation == "average-pool":
        return average_pool_aggregate(views, params)
    views, single = _as_batch(views)
    fused = stem_embed(views[:, 0, :], params)
    return fused[0] if single else fused


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, config: dict, tensors: dict[str, Tensor]) -> None:
    """Write a versioned JSON checkpoint.

    Layout::

        {"magic": "HIERAGE-CHECKPOINT", "version": 1,
         "config": {...},
         "params": {name: {"shape": [...], "values": [...]}}}

    Values are row-major and written with ``repr`` precision, so reloading
    is bit-exact.
    """
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, dict[str, Tensor]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    tensors = {}
    for name, entry in doc["params"].items():
        values = np.array(entry["values"], dtype=np.float64)
        tensors[name] = Tensor(values.reshape(entry["shape"]), requires_grad=True, name=name)
    return doc["config"], tensors


def config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
