"""Diagnostics over trained models: drop curves, perturbation robustness,
confidence histograms, representation export and out-of-domain accuracy.

Nothing here writes to parameters; every forward pass runs under ``no_grad``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Example, Split, label_map
from .encoder import ModelParams, confidence_logits, confidence_scores, embed, forward
from .objective import TDTConfig, gumbel_confidence, mask_embeddings, negative_variant, perturbation_anchor, positive_variant
from .tensor import no_grad
from .trainer import evaluate, make_batch

log = logging.getLogger(__name__)

ORDERS = ("descending", "ascending")


@dataclass
class Curve:
    rates: list[float]
    accuracies: list[float]
    order: str
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        r = np.asarray(self.rates)
        if r.size and ((np.diff(r) <= 0).any() or r.min() < 0 or r.max() > 1):
            raise ValueError("rates must be strictly increasing within [0, 1]")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")


@dataclass
class PerturbationReport:
    rate: float
    seeds: list[int]
    accuracies: list[float]

    @property
    def summary(self) -> dict[str, float]:
        a = np.asarray(self.accuracies)
        return {"mean": float(a.mean()), "sd": float(a.std(ddof=1)) if a.size > 1 else 0.0,
                "min": float(a.min()), "max": float(a.max())}


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


# ----------------------------------------------------------------- scores


def token_confidences(params: ModelParams, split: Split, batch_size: int = 256) -> list[np.ndarray]:
    """Per-example confidence of every ordinary token, in token-list order.

    A hard head reports its keep probability without Gumbel noise; a model
    without a head gets uniform scores.
    """
    head = params.config.conf_head if params.has_confidence_head else "none"
    if head == "none":
        log.warning("model has no confidence head; using uniform token scores")
        return [np.ones(len(ex.tokens)) for ex in split]
    out = []
    with no_grad():
        for i in range(0, len(split), batch_size):
            chunk = split.examples[i:i + batch_size]
            batch = make_batch(chunk, params.config)
            E = embed(batch, params)
            if head == "soft":
                c = confidence_scores(E, params, batch).data
            else:
                c = T.softmax(confidence_logits(E, params), axis=-1).data[..., 1]
            for r, ex in enumerate(chunk):
                out.append(c[r, 1:1 + len(ex.tokens)].copy())
    return out


def to_distribution(scores: np.ndarray, method: str = "linear") -> np.ndarray:
    if method == "linear":
        s = scores.sum()
        return scores / s if s > 0 else np.full_like(scores, 1.0 / len(scores))
    if method == "softmax":
        e = np.exp(scores - scores.max())
        return e / e.sum()
    raise ValueError(f"unknown normalization {method!r}")


def drop_count(rate: float, n: int) -> int:
    # round first so that e.g. 0.3 * 10 does not ceil to 4
    return min(n, int(math.ceil(round(rate * n, 9))))


def rank_positions(probs: np.ndarray, order: str) -> np.ndarray:
    """Positions sorted by confidence; ties go to the earlier position."""
    pos = np.arange(len(probs))
    key = -probs if order == "descending" else probs
    return np.lexsort((pos, key))


def masked_split(split: Split, drops: Sequence[np.ndarray], mask_id: int) -> Split:
    examples = []
    for ex, d in zip(split, drops):
        toks = list(ex.tokens)
        for i in d:
            toks[int(i)] = mask_id
        examples.append(Example(toks, ex.label, ex.flags))
    return Split(split.name, examples)


def drop_curve(params: ModelParams, split: Split, order: str, rates: Sequence[float],
               normalization: str = "linear", scores: list[np.ndarray] | None = None) -> Curve:
    """Accuracy after masking the top (descending) or bottom (ascending)
    ceil(rate * n) ordinary tokens by confidence. Scores come from the
    unmasked input once."""
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    scores = token_confidences(params, split) if scores is None else scores
    ranked = [rank_positions(to_distribution(s, normalization), order) for s in scores]
    accs = []
    for r in rates:
        if not 0 <= r <= 1:
            raise ValueError(f"rate {r} outside [0, 1]")
        drops = [rk[:drop_count(r, len(rk))] for rk in ranked]
        accs.append(evaluate(params, masked_split(split, drops, params.config.mask_id)).accuracy)
    return Curve(list(map(float, rates)), accs, order)


def perturbed_split(split: Split, rate: float, rng: np.random.Generator, mask_id: int) -> Split:
    """Each ordinary position is replaced with probability ``rate`` by MASK or
    by a token drawn from the same sequence (fair coin)."""
    examples = []
    for ex in split:
        toks = np.array(ex.tokens)
        hit = rng.random(len(toks)) < rate
        use_mask = rng.random(len(toks)) < 0.5
        sampled = rng.choice(ex.tokens, size=len(toks))
        new = np.where(hit, np.where(use_mask, mask_id, sampled), toks)
        examples.append(Example([int(t) for t in new], ex.label, ex.flags))
    return Split(split.name, examples)


def perturb_eval(params: ModelParams, split: Split, rate: float, n_datasets: int = 10,
                 seed: int = 0) -> PerturbationReport:
    if not 0 <= rate <= 1:
        raise ValueError(f"rate {rate} outside [0, 1]")
    seeds = list(range(n_datasets))
    accs = []
    for d in seeds:
        rng = np.random.default_rng([seed, d])
        accs.append(evaluate(params, perturbed_split(split, rate, rng, params.config.mask_id)).accuracy)
    return PerturbationReport(float(rate), seeds, accs)


def confidence_histogram(params: ModelParams, split: Split, n_bins: int = 10,
                         flag: str | None = None) -> Histogram:
    """Counts of ordinary-token confidence over ``n_bins`` uniform bins on [0, 1],
    optionally restricted to tokens carrying provenance ``flag``."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    scores = token_confidences(params, split)
    vals = np.concatenate([s if flag is None else s[np.array(ex.flags) == flag]
                           for s, ex in zip(scores, split)]) if len(split) else np.zeros(0)
    counts, edges = np.histogram(vals, bins=n_bins, range=(0.0, 1.0))
    return Histogram(edges, counts)


def confidence_by_flag(params: ModelParams, split: Split) -> dict[str, float]:
    scores = token_confidences(params, split)
    flags = np.concatenate([np.array(ex.flags) for ex in split])
    vals = np.concatenate(scores)
    return {f: float(vals[flags == f].mean()) for f in sorted(set(flags.tolist()))}


# ------------------------------------------------------- representations


def variant_representations(params: ModelParams, split: Split, tdt_cfg: TDTConfig | None = None,
                            batch_size: int = 256) -> dict[str, np.ndarray]:
    """h_cls for the original input and both derived variants."""
    cfg = tdt_cfg or TDTConfig(variant_mode=params.config.conf_head)
    rng = np.random.default_rng(0)
    out = {"original": [], "positive": [], "negative": []}
    with no_grad():
        for i in range(0, len(split), batch_size):
            batch = make_batch(split.examples[i:i + batch_size], params.config)
            E = embed(batch, params)
            if params.config.conf_head == "hard":
                C, _ = gumbel_confidence(E, params, cfg.tau, None, batch, noise=False)
                mu0 = mask_embeddings(params, batch.ids.shape[1])
            elif params.has_confidence_head:
                C = confidence_scores(E, params, batch)
                mu0 = perturbation_anchor(params["tok_emb"], cfg.perturbation_mode, rng,
                                          cfg.gaussian_sigma, E, batch.ordinary)
            else:
                C = T.Tensor(batch.mask)
                mu0 = perturbation_anchor(params["tok_emb"], "embedding_mean")
            variants = {"original": E, "positive": positive_variant(E, C, mu0),
                        "negative": negative_variant(E, C, keep=batch.special)}
            for k, X in variants.items():
                H, _ = forward(X, batch.mask, params)
                out[k].append(H.data[:, 0, :])
    return {k: np.concatenate(v) for k, v in out.items()}


def export_representations(params: ModelParams, split: Split, path, tdt_cfg: TDTConfig | None = None) -> int:
    """CSV with one row per (example, variant); returns the row count."""
    reps = variant_representations(params, split, tdt_cfg)
    d = params.config.d_model
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example", "variant", "label", *[f"h{j}" for j in range(d)]])
        for i, ex in enumerate(split):
            for variant in ("original", "positive", "negative"):
                w.writerow([i, variant, ex.label, *map(repr, reps[variant][i].tolist())])
                rows += 1
    return rows


def domain_eval(params: ModelParams, ood_split: Split, mapping: dict[int, int] | None = None) -> float:
    """Accuracy on a shifted split after mapping predictions into its label space."""
    res = evaluate(params, ood_split)
    preds = res.predictions if mapping is None else label_map(res.predictions, mapping)
    return float((preds == ood_split.labels).mean())


# -------------------------------------------------------------------- CSV


def write_curves_csv(curves: Sequence[Curve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "accuracy", "order"])
        for c in curves:
            for r, a in zip(c.rates, c.accuracies):
                w.writerow([repr(r), repr(a), c.order])


def write_reports_csv(reports: Sequence[PerturbationReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "seed", "accuracy"])
        for rep in sorted(reports, key=lambda r: r.rate):
            for s, a in sorted(zip(rep.seeds, rep.accuracies)):
                w.writerow([repr(rep.rate), s, repr(a)])


def write_histogram_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def read_csv_rows(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
