"""Seeded comparison runs on the default synthetic task.

The acceptance suite and ``scripts/run_experiments.py`` share these helpers:
train one arm (vanilla, tdt, tdt-hard) per seed on a common corpus, then
collect every diagnostic the directional checks need.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as A
from .data import CorpusBundle, Split, TaskSpec, generate_corpus, subsample
from .encoder import ModelConfig, ModelParams, confidence_logits, embed
from .objective import TDTConfig, tempered_softmax
from .tensor import Tensor, no_grad
from .trainer import RunRecord, TrainConfig, evaluate, make_batch, train

log = logging.getLogger(__name__)

DROP_RATES = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
PERTURB_RATES = [0.1, 0.2, 0.3, 0.4, 0.5]
ARMS = {
    "vanilla": None,
    "tdt": TDTConfig(m=2.0, alpha=2.0, beta=1.0, gamma=0.1),
    "tdt-hard": TDTConfig(m=2.0, alpha=2.0, beta=1.0, gamma=0.1, variant_mode="hard", tau=1.0),
}


@dataclass
class ArmResult:
    arm: str
    seed: int
    best_step: int | None
    wall_clock_s: float
    iid_acc: float
    anti_acc: float
    train_acc: float
    conf_by_flag: dict[str, float] = field(default_factory=dict)
    drop: dict[str, list[float]] = field(default_factory=dict)
    perturb: dict[str, list[float]] = field(default_factory=dict)
    loss_at: dict[str, float] = field(default_factory=dict)


def model_config_for(spec: TaskSpec, tdt_cfg: TDTConfig | None) -> ModelConfig:
    head = "soft" if tdt_cfg is None else tdt_cfg.variant_mode
    return ModelConfig(vocab_size=spec.vocab_size, n_classes=spec.n_classes, conf_head=head)


def train_arm(corpus: CorpusBundle, arm: str, seed: int, train_split: Split | None = None,
              train_cfg: TrainConfig | None = None) -> tuple[ModelParams, RunRecord]:
    tdt_cfg = ARMS[arm]
    cfg = train_cfg or TrainConfig(seed=seed)
    if cfg.seed != seed:
        raise ValueError("train_cfg.seed must match seed")
    return train(train_split or corpus["train"], model_config_for(corpus.spec, tdt_cfg), tdt_cfg, cfg,
                 dev_split=corpus["dev"])


def diagnose(params: ModelParams, record: RunRecord, corpus: CorpusBundle, arm: str,
             split_name: str = "test_iid", full: bool = True, n_datasets: int = 10) -> ArmResult:
    split = corpus[split_name]
    res = ArmResult(arm=arm, seed=record.seed, best_step=record.best_step,
                    wall_clock_s=float(record.wall_clock_s or 0.0),
                    iid_acc=evaluate(params, corpus["test_iid"]).accuracy,
                    anti_acc=evaluate(params, corpus["test_antispurious"]).accuracy,
                    train_acc=evaluate(params, Split("train1k", corpus["train"].examples[:1000])).accuracy)
    for s in (50, 500):
        if len(record.steps) >= s:
            res.loss_at[str(s)] = record.steps[s - 1]["total"]
    if not full:
        return res
    if arm != "vanilla":
        res.conf_by_flag = A.confidence_by_flag(params, split)
        scores = A.token_confidences(params, split)
        for order in A.ORDERS:
            res.drop[order] = A.drop_curve(params, split, order, DROP_RATES, scores=scores).accuracies
    for r in PERTURB_RATES:
        res.perturb[repr(r)] = A.perturb_eval(params, split, r, n_datasets=n_datasets, seed=0).accuracies
    return res


def hard_sharpness(params: ModelParams, split: Split, tau: float = 0.1, n_draws: int = 10_000,
                   seed: int = 0) -> float:
    """Fraction of seeded (token, Gumbel) draws whose tempered softmax max exceeds 0.99,
    using the trained hard head's logits on ordinary tokens of ``split``."""
    rng = np.random.default_rng(seed)
    with no_grad():
        batch = make_batch(split.examples, params.config)
        z = confidence_logits(embed(batch, params), params).data[batch.ordinary.astype(bool)]
    pick = z[rng.integers(0, len(z), size=n_draws)]
    y = tempered_softmax(Tensor(pick), rng.gumbel(size=pick.shape), tau).data
    return float((y.max(-1) > 0.99).mean())


def default_corpus(seed: int = 0) -> CorpusBundle:
    return generate_corpus(TaskSpec.default(), seed=seed)


def low_resource_split(corpus: CorpusBundle, k: int = 500, seed: int = 0) -> Split:
    return subsample(corpus["train"], k, seed)


def run_suite(out_dir, seeds=range(5), arms=("vanilla", "tdt"), low_resource_seeds=range(4),
              hard_seeds=(0,), data_seed: int = 0) -> dict:
    """Train and diagnose every arm; results are appended to ``out_dir/results.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = default_corpus(data_seed)
    rows = []

    def emit(kind, res: ArmResult, extra=None):
        row = {"kind": kind, **asdict(res), **(extra or {})}
        rows.append(row)
        with open(out / "results.jsonl", "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        log.info("%s %s seed %d: iid %.3f anti %.3f", kind, res.arm, res.seed, res.iid_acc, res.anti_acc)

    for seed in seeds:
        for arm in arms:
            t0 = time.perf_counter()
            p, rec = train_arm(corpus, arm, seed)
            emit("main", diagnose(p, rec, corpus, arm), {"elapsed_s": time.perf_counter() - t0})
    for seed in hard_seeds:
        p, rec = train_arm(corpus, "tdt-hard", seed)
        emit("hard", diagnose(p, rec, corpus, "tdt-hard", full=False),
             {"sharpness_tau01": hard_sharpness(p, corpus["test_iid"])})
    small = low_resource_split(corpus)
    for seed in low_resource_seeds:
        for arm in arms:
            p, rec = train_arm(corpus, arm, seed, train_split=small)
            emit("low_resource", diagnose(p, rec, corpus, arm, full=False))
    return {"rows": rows}
