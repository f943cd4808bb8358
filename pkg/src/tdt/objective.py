"""Positive/negative input variants and the regularized fine-tuning losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .encoder import ConfigError, EncodedBatch, ModelParams, confidence_logits, confidence_scores, embed, forward
from .tensor import Tensor

PERTURBATION_MODES = ("zero", "gaussian", "embedding_mean", "sequence_mean")
VARIANT_MODES = ("soft", "hard")
KL_MODES = ("forward", "symmetric")


@dataclass
class TDTConfig:
    m: float = 2.0
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.1
    perturbation_mode: str = "embedding_mean"
    variant_mode: str = "soft"
    tau: float = 1.0
    gaussian_sigma: float | None = None  # None: std of the token embedding table
    kl_mode: str = "forward"
    length_normalize: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("m", "alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {v}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.perturbation_mode not in PERTURBATION_MODES:
            raise ConfigError(f"unknown perturbation_mode {self.perturbation_mode!r}")
        if self.variant_mode not in VARIANT_MODES:
            raise ConfigError(f"unknown variant_mode {self.variant_mode!r}")
        if self.kl_mode not in KL_MODES:
            raise ConfigError(f"unknown kl_mode {self.kl_mode!r}")
        if self.gaussian_sigma is not None and self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")

    @property
    def is_vanilla(self) -> bool:
        return self.alpha == 0 and self.beta == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TDTConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown tdt config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBundle:
    l_cla: Tensor
    l_c: Tensor
    l_r: Tensor
    total: Tensor
    diagnostics: dict[str, float] = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        return {"l_cla": float(self.l_cla.data), "l_c": float(self.l_c.data),
                "l_r": float(self.l_r.data), "total": float(self.total.data)}


# ----------------------------------------------------------------- variants


def perturbation_anchor(embedding_table: Tensor, mode: str, rng: np.random.Generator | None = None,
                        sigma: float | None = None, E: Tensor | None = None,
                        ordinary: np.ndarray | None = None) -> Tensor:
    """The vector mu0 that suppressed content is interpolated toward.

    ``embedding_mean`` stays in the graph, so gradients reach the table through
    it. ``sequence_mean`` averages the ordinary positions of each row of ``E``
    and has shape (B, 1, d_model). The default ``gaussian`` scale (table std)
    is a constant: no gradient flows through it.
    """
    d = embedding_table.shape[1]
    if mode == "zero":
        return Tensor(np.zeros(d))
    if mode == "gaussian":
        if rng is None:
            raise ConfigError("gaussian anchor needs an rng")
        s = float(np.std(embedding_table.data)) if sigma is None else sigma
        return Tensor(rng.normal(0.0, s, size=d))
    if mode == "embedding_mean":
        return T.mean(embedding_table, axis=0)
    if mode == "sequence_mean":
        if E is None or ordinary is None:
            raise ConfigError("sequence_mean anchor needs E and the ordinary-token mask")
        w = ordinary / np.maximum(ordinary.sum(axis=1, keepdims=True), 1.0)
        return T.sum(E * w[:, :, None], axis=1, keepdims=True)
    raise ConfigError(f"unknown perturbation mode {mode!r}")


def positive_variant(E: Tensor, C: Tensor, mu0) -> Tensor:
    """e+_i = c_i * e_i + (1 - c_i) * mu0."""
    c = T.reshape(C, C.shape + (1,))
    return c * E + (1.0 - c) * mu0


def negative_variant(E: Tensor, C: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """e-_i = (1 - c_i) * e_i; rows flagged in ``keep`` are copied unchanged."""
    if keep is not None:
        C = C * (1.0 - keep)
    c = T.reshape(C, C.shape + (1,))
    return (1.0 - c) * E


# ------------------------------------------------------------------- losses


def classification_loss(P: Tensor, y) -> Tensor:
    return T.mean(T.nll_from_probs(P, np.asarray(y)))


def confidence_penalty(C: Tensor, ordinary: np.ndarray, length_normalize: bool = False) -> Tensor:
    """Batch mean of per-example ||C||_2 over ordinary positions."""
    norms = T.l2_norm(C * ordinary, axis=1)
    if length_normalize:
        norms = norms * (1.0 / np.sqrt(np.maximum(ordinary.sum(axis=1), 1.0)))
    return T.mean(norms)


def confidence_loss(P_pos: Tensor, y, C: Tensor, gamma: float, ordinary: np.ndarray,
                    length_normalize: bool = False) -> Tensor:
    return classification_loss(P_pos, y) + T.scale(confidence_penalty(C, ordinary, length_normalize), gamma)


def divergence(a: Tensor, b: Tensor, mode: str = "forward") -> Tensor:
    """d(a, b) = KL(a || b), or the mean of both directions."""
    if mode == "forward":
        return T.kl_divergence(a, b)
    if mode == "symmetric":
        return T.scale(T.kl_divergence(a, b) + T.kl_divergence(b, a), 0.5)
    raise ConfigError(f"unknown kl mode {mode!r}")


def triplet_terms(P: Tensor, P_pos: Tensor, P_neg: Tensor, kl_mode: str = "forward"):
    return (divergence(P_pos, P, kl_mode), divergence(P_neg, P, kl_mode), divergence(P_neg, P_pos, kl_mode))


def triplet_loss(P: Tensor, P_pos: Tensor, P_neg: Tensor, m: float, kl_mode: str = "forward") -> Tensor:
    """mean over rows of max(m + d(P+,P) - d(P-,P) - d(P-,P+), 0)."""
    d_pos, d_neg, d_negpos = triplet_terms(P, P_pos, P_neg, kl_mode)
    return T.mean(T.hinge(float(m) + d_pos - d_neg - d_negpos))


# ---------------------------------------------------------------- hard mode


def tempered_softmax(logits: Tensor, gumbel: np.ndarray | None, tau: float) -> Tensor:
    """softmax((log softmax(z) + g) / tau) over the last axis."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    x = T.log_softmax(logits, axis=-1)
    if gumbel is not None:
        x = x + gumbel
    return T.softmax(T.scale(x, 1.0 / tau), axis=-1)


def gumbel_confidence(E: Tensor, params: ModelParams, tau: float, rng: np.random.Generator | None,
                      batch: EncodedBatch, noise: bool = True,
                      straight_through: bool = True) -> tuple[Tensor, Tensor]:
    """Hard {0,1} keep decisions via argmax of a Gumbel-perturbed tempered softmax.

    Category 1 means keep; ties keep. With ``straight_through`` the forward
    value is the hard decision and the backward pass uses the keep
    probability. Returns (C, probs).
    """
    if params.config.conf_head != "hard":
        raise ConfigError("hard variant needs a 2-logit confidence head")
    z = confidence_logits(E, params)
    g = rng.gumbel(size=z.shape) if noise else None
    y = tempered_softmax(z, g, tau)
    keep_p = T.reshape(T.index(y, (..., slice(1, 2))), y.shape[:2])
    if straight_through:
        hard = (y.data[..., 1] >= y.data[..., 0]).astype(np.float64)
        c = T.straight_through(hard, keep_p)
    else:
        c = keep_p
    return c * batch.ordinary + batch.special, y


def mask_embeddings(params: ModelParams, seq_len: int) -> Tensor:
    """Embedding-layer output of the MASK token at each position, (T, d)."""
    cfg = params.config
    tok = T.embedding(params["tok_emb"], np.full(seq_len, cfg.mask_id))
    return tok + T.index(params["pos_emb"], slice(0, seq_len))


# -------------------------------------------------------------------- total


def build_variants(batch: EncodedBatch, E: Tensor, params: ModelParams, cfg: TDTConfig,
                   rng: np.random.Generator | None, noise: bool = True, straight_through: bool = True):
    """Confidence scores plus E+ and E- for one batch."""
    if cfg.variant_mode == "soft":
        C = confidence_scores(E, params, batch)
        mu0 = perturbation_anchor(params["tok_emb"], cfg.perturbation_mode, rng,
                                  cfg.gaussian_sigma, E, batch.ordinary)
    else:
        C, _ = gumbel_confidence(E, params, cfg.tau, rng, batch, noise, straight_through)
        mu0 = mask_embeddings(params, batch.ids.shape[1])
    E_pos = positive_variant(E, C, mu0)
    E_neg = negative_variant(E, C, keep=batch.special)
    return C, E_pos, E_neg


def total_loss(batch: EncodedBatch, params: ModelParams, cfg: TDTConfig,
               rng: np.random.Generator | None = None, noise: bool = True,
               straight_through: bool = True) -> LossBundle:
    """L = L_cla + alpha * L_C + beta * L_R from three weight-shared passes."""
    cfg.validate()
    head = params.config.conf_head
    if head == "none" or head != cfg.variant_mode:
        raise ConfigError(f"variant_mode={cfg.variant_mode!r} needs a matching confidence head, model has {head!r}")
    E = embed(batch, params)
    _, P = forward(E, batch.mask, params)
    l_cla = classification_loss(P, batch.labels)

    C, E_pos, E_neg = build_variants(batch, E, params, cfg, rng, noise, straight_through)
    _, P_pos = forward(E_pos, batch.mask, params)
    _, P_neg = forward(E_neg, batch.mask, params)

    penalty = confidence_penalty(C, batch.ordinary, cfg.length_normalize)
    l_c = classification_loss(P_pos, batch.labels) + T.scale(penalty, cfg.gamma)
    d_pos, d_neg, d_negpos = triplet_terms(P, P_pos, P_neg, cfg.kl_mode)
    l_r = T.mean(T.hinge(float(cfg.m) + d_pos - d_neg - d_negpos))
    total = l_cla + T.scale(l_c, cfg.alpha) + T.scale(l_r, cfg.beta)

    ordn = batch.ordinary
    diagnostics = {
        "d_pos_orig": float(d_pos.data.mean()),
        "d_neg_orig": float(d_neg.data.mean()),
        "d_neg_pos": float(d_negpos.data.mean()),
        "c_norm": float(penalty.data),
        "mean_conf": float((C.data * ordn).sum() / max(ordn.sum(), 1.0)),
    }
    return LossBundle(l_cla, l_c, l_r, total, diagnostics)


def vanilla_loss(batch: EncodedBatch, params: ModelParams) -> Tensor:
    E = embed(batch, params)
    _, P = forward(E, batch.mask, params)
    return classification_loss(P, batch.labels)
