"""Tiny transformer encoder classifier with a token confidence head."""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 2000
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    n_classes: int = 4
    pad_id: int = 0
    cls_id: int = 1
    sep_id: int = 2
    mask_id: int = 3
    # "soft": W is d_model x 1; "hard": d_model x 2 (Gumbel); "none": no head
    conf_head: str = "soft"
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for CLS and SEP")
        special = self.special_ids
        if len(set(special)) != len(special):
            raise ConfigError("special token ids must be distinct")
        if any(not 0 <= s < self.vocab_size for s in special):
            raise ConfigError("special token ids must be < vocab_size")
        if self.conf_head not in ("soft", "hard", "none"):
            raise ConfigError(f"unknown conf_head {self.conf_head!r}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (self.pad_id, self.cls_id, self.sep_id, self.mask_id)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncodedBatch:
    ids: np.ndarray  # (B, T) int64
    mask: np.ndarray  # (B, T) float, 1 = real token
    labels: np.ndarray  # (B,) int64
    cls_id: int = 1
    sep_id: int = 2

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def special(self) -> np.ndarray:
        """1.0 at CLS/SEP positions."""
        return ((self.ids == self.cls_id) | (self.ids == self.sep_id)).astype(np.float64) * self.mask

    @property
    def ordinary(self) -> np.ndarray:
        """1.0 at real, non-CLS/SEP positions."""
        return self.mask - self.special

    def take(self, rows) -> "EncodedBatch":
        return EncodedBatch(self.ids[rows], self.mask[rows], self.labels[rows], self.cls_id, self.sep_id)


def encode_batch(token_lists, labels, cfg: ModelConfig, pad_to: int | None = None) -> EncodedBatch:
    """Wrap each token list as CLS ... SEP and right-pad to a common length."""
    n = max((len(t) for t in token_lists), default=0) + 2
    width = max(n, pad_to or 0)
    if width > cfg.max_len:
        raise ValueError(f"sequence length {width} exceeds max_len={cfg.max_len}")
    ids = np.full((len(token_lists), width), cfg.pad_id, dtype=np.int64)
    mask = np.zeros((len(token_lists), width))
    for r, toks in enumerate(token_lists):
        row = [cfg.cls_id, *toks, cfg.sep_id]
        ids[r, : len(row)] = row
        mask[r, : len(row)] = 1.0
    return EncodedBatch(ids, mask, np.asarray(labels, dtype=np.int64), cfg.cls_id, cfg.sep_id)


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + s for s in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                            "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")]


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def has_confidence_head(self) -> bool:
        return "conf.w" in self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                         for k, v in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            v = self.tensors[k]
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def check_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.isfinite(v.data).all():
                raise FloatingPointError(f"non-finite values in parameter {k}")

    # --- checkpoint I/O: one JSON document, arrays as base64 little-endian f8
    def to_document(self, meta: dict | None = None) -> dict:
        arrays = {}
        for k, v in self.tensors.items():
            arr = np.ascontiguousarray(v.data, dtype="<f8")
            arrays[k] = {"shape": list(arr.shape), "dtype": "<f8",
                         "data": base64.b64encode(arr.tobytes()).decode("ascii")}
        return {"format": "tdt-checkpoint", "version": 1, "config": asdict(self.config),
                "meta": meta or {}, "order": list(self.tensors), "params": arrays}

    @classmethod
    def from_document(cls, doc: dict) -> "ModelParams":
        if doc.get("format") != "tdt-checkpoint":
            raise ValueError("not a tdt checkpoint document")
        cfg = ModelConfig.from_dict(doc["config"])
        tensors = {}
        for k in doc.get("order", sorted(doc["params"])):
            spec = doc["params"][k]
            raw = base64.b64decode(spec["data"])
            arr = np.frombuffer(raw, dtype=spec["dtype"]).astype(np.float64).reshape(spec["shape"])
            tensors[k] = Tensor(arr, requires_grad=True, name=k)
        return cls(cfg, tensors)

    def save(self, path, meta: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_document(meta), sort_keys=True))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_document(json.loads(Path(path).read_text()))


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Normal(0, init_std) weights, zero biases, unit layer-norm gains.

    The confidence head is drawn last so the rest of the model is identical
    whichever head variant is configured.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d, ff, std = cfg.d_model, cfg.d_ff, cfg.init_std
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for i in range(cfg.n_layers):
        for name in _layer_names(i):
            leaf = name.rsplit(".", 1)[-1]
            shapes[name] = {
                "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                "w1": (d, ff), "b1": (ff,), "w2": (ff, d),
            }.get(leaf, (d,))
    shapes.update({"head.w1": (d, d), "head.b1": (d,), "head.w2": (d, cfg.n_classes),
                   "head.b2": (cfg.n_classes,)})
    if cfg.conf_head != "none":
        k = 1 if cfg.conf_head == "soft" else 2
        shapes.update({"conf.w": (d, k), "conf.b": (k,)})

    tensors = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


def param_group(name: str) -> str:
    """Coarse grouping used in gradient-check reports."""
    if name in ("tok_emb", "pos_emb"):
        return "embedding"
    if name.startswith("layers."):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln"):
            return "layernorm"
        if leaf in ("w1", "b1", "w2", "b2"):
            return "feedforward"
        return "attention"
    if name.startswith("head."):
        return "classifier"
    return "confidence"


# ------------------------------------------------------------------ forward


def embed(batch: EncodedBatch, params: ModelParams) -> Tensor:
    """Token embedding plus positional embedding, (B, T, d_model)."""
    cfg = params.config
    t = batch.ids.shape[1]
    if t > cfg.max_len:
        raise IndexError(f"sequence length {t} exceeds max_len={cfg.max_len}")
    tok = T.embedding(params["tok_emb"], batch.ids)
    pos = T.index(params["pos_emb"], slice(0, t))
    return tok + pos


def confidence_logits(E: Tensor, params: ModelParams) -> Tensor:
    """Raw head output z(e_i), shape (B, T, k)."""
    return T.matmul(E, params["conf.w"]) + params["conf.b"]


def confidence_scores(E: Tensor, params: ModelParams, batch: EncodedBatch) -> Tensor:
    """c_i = sigmoid(W e_i + b); CLS/SEP forced to 1 and PAD to 0 without gradient."""
    if params.config.conf_head != "soft":
        raise ConfigError("confidence_scores needs a soft (1-logit) confidence head")
    z = confidence_logits(E, params)
    c = T.sigmoid(T.reshape(z, z.shape[:2]))
    return c * batch.ordinary + batch.special


def _attention(x: Tensor, params: ModelParams, i: int, key_bias: np.ndarray, qmask: np.ndarray) -> Tensor:
    cfg = params.config
    b, t, d = x.shape
    h = cfg.n_heads
    dh = d // h
    p = f"layers.{i}."

    def heads(w: str) -> Tensor:
        y = T.matmul(x, params[p + "w" + w]) + params[p + "b" + w]
        return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)) + key_bias
    attn = T.softmax(scores, axis=-1) * qmask
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    return T.matmul(ctx, params[p + "wo"]) + params[p + "bo"]


def encode(E: Tensor, mask: np.ndarray, params: ModelParams) -> Tensor:
    """Post-LN transformer stack; returns H of shape (B, T, d_model)."""
    cfg = params.config
    mask = np.asarray(mask, dtype=np.float64)
    key_bias = np.where(mask > 0, 0.0, T.MASK_NEG)[:, None, None, :]
    qmask = mask[:, None, :, None]
    x = E
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        x = T.layer_norm(x + _attention(x, params, i, key_bias, qmask),
                         params[p + "ln1_g"], params[p + "ln1_b"], cfg.ln_eps)
        ff = T.matmul(T.relu(T.matmul(x, params[p + "w1"]) + params[p + "b1"]), params[p + "w2"]) + params[p + "b2"]
        x = T.layer_norm(x + ff, params[p + "ln2_g"], params[p + "ln2_b"], cfg.ln_eps)
        if not np.isfinite(x.data).all():
            raise FloatingPointError(f"non-finite activations in encoder layer {i}")
    return x


def classify(h_cls: Tensor, params: ModelParams) -> Tensor:
    hidden = T.tanh(T.matmul(h_cls, params["head.w1"]) + params["head.b1"])
    return T.softmax(T.matmul(hidden, params["head.w2"]) + params["head.b2"], axis=-1)


def forward(E: Tensor, mask: np.ndarray, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Encode an embedding-shaped input (E, E+ or E-) and classify from h_cls."""
    H = encode(E, mask, params)
    P = classify(T.index(H, (slice(None), 0)), params)
    if not np.isfinite(P.data).all():
        raise FloatingPointError("non-finite activations in classifier head")
    return H, P


def predict_proba(batch: EncodedBatch, params: ModelParams) -> np.ndarray:
    with no_grad():
        return forward(embed(batch, params), batch.mask, params)[1].data


def argmax_labels(P: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the smaller index
    return np.argmax(P, axis=-1)


def predict(batch: EncodedBatch, params: ModelParams) -> np.ndarray:
    return argmax_labels(predict_proba(batch, params))
