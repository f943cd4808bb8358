"""Deterministic mini-batch training with Adam and a warmup/decay schedule."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Split
from .encoder import ConfigError, EncodedBatch, ModelConfig, ModelParams, encode_batch, init_params, predict_proba
from .objective import TDTConfig, total_loss, vanilla_loss
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    eval_interval: int = 250
    checkpoint_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    seed: int
    label: str
    config: dict
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_dev_acc: float | None = None
    wall_clock_s: float | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d

    def save_json(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_timing), indent=1, sort_keys=True))

    def save_csv(self, path) -> None:
        dev = {e["step"]: e["dev_acc"] for e in self.evals}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "l_cla", "l_c", "l_r", "total", "dev_acc"])
            for s in self.steps:
                acc = dev.get(s["step"])
                w.writerow([s["step"], repr(s["l_cla"]), repr(s["l_c"]), repr(s["l_r"]), repr(s["total"]),
                            "" if acc is None else repr(acc)])


# ---------------------------------------------------------------- optimizer


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup, then linear decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr if step <= cfg.total_steps else 0.0
    return cfg.lr * max(0.0, (cfg.total_steps - step) / span)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params.names():
        g = grads.get(name)
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # params are never mutated while on a live tape: the tape is empty here
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ------------------------------------------------------------------ batches


def make_batch(examples, cfg: ModelConfig) -> EncodedBatch:
    return encode_batch([ex.tokens for ex in examples], [ex.label for ex in examples], cfg)


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    probs: np.ndarray
    labels: np.ndarray


def evaluate(params: ModelParams, split: Split, batch_size: int = 256) -> EvalResult:
    if len(split) == 0:
        raise ValueError(f"cannot evaluate on empty split {split.name!r}")
    probs = []
    for i in range(0, len(split), batch_size):
        probs.append(predict_proba(make_batch(split.examples[i:i + batch_size], params.config), params))
    P = np.concatenate(probs)
    preds = np.argmax(P, axis=-1)
    labels = split.labels
    return EvalResult(float((preds == labels).mean()), preds, P, labels)


# -------------------------------------------------------------------- train


def run_label(tdt_cfg: TDTConfig | None) -> str:
    if tdt_cfg is None or tdt_cfg.is_vanilla:
        return "vanilla"
    if tdt_cfg.alpha == 0:
        return "tdt-no-lc"
    if tdt_cfg.beta == 0:
        return "tdt-no-lr"
    return "tdt-hard" if tdt_cfg.variant_mode == "hard" else "tdt"


def train(train_split: Split, model_cfg: ModelConfig, tdt_cfg: TDTConfig | None, train_cfg: TrainConfig,
          dev_split: Split | None = None, init: ModelParams | None = None,
          fast_vanilla: bool = True, log_every: int = 0) -> tuple[ModelParams, RunRecord]:
    """Train and return the best-dev parameters (final ones without a dev split).

    ``tdt_cfg=None`` is plain fine-tuning. With ``fast_vanilla`` a TDT config
    with alpha = beta = 0 takes the same single-pass path; set it False to
    run the full three-pass objective with zero weights.
    """
    if len(train_split) == 0:
        raise TrainingError("empty train split")
    train_cfg.validate()
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    init_rng, shuffle_rng, noise_rng = (np.random.default_rng(s) for s in seeds)
    params = init.copy() if init is not None else init_params(model_cfg, init_rng)
    vanilla = tdt_cfg is None or (fast_vanilla and tdt_cfg.is_vanilla)

    record = RunRecord(seed=train_cfg.seed, label=run_label(tdt_cfg), config={
        "model": asdict(model_cfg), "tdt": None if tdt_cfg is None else tdt_cfg.to_dict(),
        "train": asdict(train_cfg)})
    state = AdamState()
    best = params.copy()
    n = len(train_split)
    order = shuffle_rng.permutation(n)
    cursor = 0
    t0 = time.perf_counter()

    def run_eval(step: int):
        nonlocal best
        acc = evaluate(params, dev_split).accuracy
        record.evals.append({"step": step, "dev_acc": acc})
        if record.best_dev_acc is None or acc > record.best_dev_acc:
            record.best_dev_acc, record.best_step = acc, step
            best = params.copy()

    for step in range(1, train_cfg.total_steps + 1):
        if cursor + train_cfg.batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        batch = make_batch([train_split.examples[i] for i in idx], model_cfg)

        params.zero_grad()
        with Tape() as tape:
            try:
                if vanilla:
                    loss = vanilla_loss(batch, params)
                    parts = {"l_cla": float(loss.data), "l_c": 0.0, "l_r": 0.0, "total": float(loss.data)}
                else:
                    bundle = total_loss(batch, params, tdt_cfg, noise_rng)
                    loss = bundle.total
                    parts = bundle.floats()
                    parts.update(bundle.diagnostics)
            except FloatingPointError as e:
                tape.clear()
                raise TrainingError(f"training diverged at step {step}: {e}") from e
            if not np.isfinite(loss.data):
                tape.clear()
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            tape.backward(loss)
        grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
        gnorm = clip_gradients(grads, train_cfg.clip_norm) if train_cfg.clip_norm else None
        adam_step(params, grads, state, train_cfg, lr_at_step(step, train_cfg))
        parts["step"] = step
        if gnorm is not None:
            parts["grad_norm"] = gnorm
        record.steps.append(parts)
        if log_every and step % log_every == 0:
            log.info("step %d %s", step, {k: round(v, 4) for k, v in parts.items() if k != "step"})
        if dev_split is not None and (step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps):
            run_eval(step)

    if dev_split is not None and train_cfg.total_steps == 0:
        run_eval(0)
    params.zero_grad()
    record.wall_clock_s = time.perf_counter() - t0
    result = best if dev_split is not None else params
    if train_cfg.checkpoint_path:
        result.save(train_cfg.checkpoint_path, meta={"label": record.label, "best_step": record.best_step})
    return result, record
