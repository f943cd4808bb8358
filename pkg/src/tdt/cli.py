"""Command-line entry point: generate, train, eval, analyze, gradcheck.

Every command takes an optional JSON config document (``--config``); flags
override it. Each command writes ``config.json`` into its output directory,
and ``tdt <command> --config OUT/config.json --out NEW`` replays it.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis as A
from .data import SPLITS, SpecError, TaskSpec, generate_corpus, read_jsonl, write_jsonl
from .encoder import ConfigError, ModelConfig, ModelParams, encode_batch, init_params, param_group
from .gradcheck import GradCheckError, grad_check_many
from .objective import TDTConfig, total_loss
from .trainer import TrainConfig, TrainingError, evaluate, train

log = logging.getLogger("tdt")

OUTPUT_ROOT_ENV = "TDT_OUTPUT_ROOT"
ANALYSES = ("drop-curve", "perturb", "histogram", "export-reprs", "domain-eval")
GRID = [(m, a, b) for m in (0.0, 2.0) for a in (0.5, 2.0, 4.0) for b in (0.5, 1.0)]


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


@dataclass
class AnalysisConfig:
    split: str = "dev"
    rates: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    perturb_rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    n_datasets: int = 10
    seed: int = 0
    n_bins: int = 10
    ood_split: str = "test_antispurious"
    mapping: dict[str, int] | None = None
    normalization: str = "linear"


@dataclass
class RunConfig:
    task: dict | None = None
    task_path: str | None = None
    data_seed: int = 0
    sizes: dict[str, int] | None = None
    data_dir: str | None = None
    checkpoint: str | None = None
    model: dict = field(default_factory=dict)
    tdt: dict | None = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    output_dir: str | None = None
    analyses: list[str] = field(default_factory=list)
    analysis: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        rc = cls(**d)
        rc.validate()
        return rc

    def validate(self) -> None:
        if self.task is not None:
            TaskSpec.from_dict(self.task)
        ModelConfig.from_dict(self.model)
        if self.tdt is not None:
            TDTConfig.from_dict(self.tdt)
        TrainConfig.from_dict(self.train)
        self.analysis_config()
        bad = [a for a in self.analyses if a not in ANALYSES]
        if bad:
            raise UsageError(f"unknown analysis {bad[0]!r}; valid names: {', '.join(ANALYSES)}")

    def analysis_config(self) -> AnalysisConfig:
        unknown = set(self.analysis) - {f.name for f in fields(AnalysisConfig)}
        if unknown:
            raise ConfigError(f"unknown analysis config keys: {sorted(unknown)}")
        return AnalysisConfig(**self.analysis)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["output_dir"] = None
        return d


# ----------------------------------------------------------------- helpers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError("config document must be a JSON object")
    return doc


def _output_dir(arg: str | None, rc: RunConfig, default_name: str) -> Path:
    if arg:
        return Path(arg)
    if rc.output_dir:
        return Path(rc.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_corpus(data_dir: Path) -> tuple[TaskSpec, dict]:
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise RuntimeFailure(f"no manifest.json in data dir {data_dir}")
    doc = json.loads(manifest.read_text())
    spec = TaskSpec.from_dict(doc["spec"])
    splits = {name: read_jsonl(data_dir / f"{name}.jsonl", name) for name in SPLITS}
    return spec, splits


def _parse_kv_ints(s: str) -> dict[str, int]:
    out = {}
    for part in s.split(","):
        k, _, v = part.partition("=")
        out[k.strip()] = int(v)
    return out


def _parse_floats(s: str) -> list[float]:
    """Comma list ("0.1,0.2") or inclusive range in steps of 0.1 ("0.1..0.5")."""
    if ".." in s:
        lo, hi = (float(x) for x in s.split(".."))
        n = int(round((hi - lo) / 0.1))
        return [round(lo + 0.1 * i, 10) for i in range(n + 1)]
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"bad rate list {s!r}") from e


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    doc = _load_config(args.config)
    if args.spec:
        try:
            doc["task"] = json.loads(Path(args.spec).read_text())
        except FileNotFoundError as e:
            raise UsageError(f"spec file not found: {args.spec}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"spec file {args.spec} is not valid JSON: {e}") from e
        doc.pop("task_path", None)
    elif doc.get("task") is None and doc.get("task_path"):
        try:
            doc["task"] = json.loads(Path(doc["task_path"]).read_text())
        except (FileNotFoundError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read task spec {doc['task_path']}: {e}") from e
        doc["task_path"] = None
    if doc.get("task") is None:
        doc["task"] = TaskSpec.default().to_dict()
    if args.seed is not None:
        doc["data_seed"] = args.seed
    if args.sizes:
        doc["sizes"] = {**(doc.get("sizes") or {}), **_parse_kv_ints(args.sizes)}
    try:
        rc = RunConfig.from_dict(doc)
    except SpecError as e:
        raise UsageError(f"invalid task spec: {e}") from e
    spec = TaskSpec.from_dict(rc.task)
    sizes = {**{"train": 8000, "dev": 1000, "test_iid": 1000, "test_antispurious": 1000}, **(rc.sizes or {})}
    rc.sizes = sizes
    corpus = generate_corpus(spec, sizes, rc.data_seed)

    out = _output_dir(args.out, rc, "data")
    out.mkdir(parents=True, exist_ok=True)
    vocab = spec.vocab()
    checksums = {}
    for name in SPLITS:
        path = out / f"{name}.jsonl"
        write_jsonl(corpus[name], path, vocab)
        checksums[path.name] = sha256_file(path)
    _write_json(out / "manifest.json", {"spec": spec.to_dict(), "seed": rc.data_seed, "sizes": sizes,
                                         "checksums": checksums})
    _write_json(out / "config.json", rc.snapshot())
    print(f"wrote {len(SPLITS)} splits to {out}")
    return 0


def _train_overrides(doc: dict, args) -> dict:
    tdt = doc.get("tdt")
    tdt = {} if tdt is None else dict(tdt)
    for flag, key in (("alpha", "alpha"), ("beta", "beta"), ("gamma", "gamma"), ("margin", "m"),
                      ("variant", "variant_mode"), ("perturb", "perturbation_mode"), ("tau", "tau")):
        v = getattr(args, flag)
        if v is not None:
            tdt[key] = v
    doc["tdt"] = tdt
    tr = dict(doc.get("train") or {})
    for flag in ("seed", "lr", "total_steps", "warmup_steps", "batch_size", "eval_interval"):
        v = getattr(args, flag)
        if v is not None:
            tr[flag] = v
    doc["train"] = tr
    if args.data:
        doc["data_dir"] = str(args.data)
    return doc


def cmd_train(args) -> int:
    doc = _train_overrides(_load_config(args.config), args)
    rc = RunConfig.from_dict(doc)
    if not rc.data_dir:
        raise UsageError("train needs --data (or data_dir in the config)")
    tdt_cfg = TDTConfig.from_dict(rc.tdt)
    train_cfg = TrainConfig.from_dict(rc.train)
    spec, splits = _load_corpus(Path(rc.data_dir))
    model_doc = {"vocab_size": spec.vocab_size, "n_classes": spec.n_classes,
                 "conf_head": tdt_cfg.variant_mode, **rc.model}
    model_cfg = ModelConfig.from_dict(model_doc)
    if model_cfg.max_len < spec.max_len + 2:
        raise ConfigError(f"model max_len={model_cfg.max_len} cannot hold sequences of {spec.max_len} + CLS/SEP")
    rc.model = asdict(model_cfg)

    out = _output_dir(args.out, rc, "train")
    out.mkdir(parents=True, exist_ok=True)
    try:
        params, record = train(splits["train"], model_cfg, tdt_cfg, train_cfg, dev_split=splits["dev"],
                               log_every=args.log_every)
    except (TrainingError, FloatingPointError) as e:
        raise RuntimeFailure(str(e)) from e
    params.save(out / "checkpoint.json", meta={"label": record.label, "best_step": record.best_step})
    record.save_json(out / "run_record.json", include_timing=args.record_timing)
    record.save_csv(out / "metrics.csv")
    _write_json(out / "config.json", rc.snapshot())
    print(f"{record.label}: best dev acc {record.best_dev_acc} at step {record.best_step}; wrote {out}")
    return 0


def _load_checkpoint(path) -> ModelParams:
    if not path or not Path(path).exists():
        raise RuntimeFailure(f"checkpoint not found: {path}")
    return ModelParams.load(path)


def cmd_eval(args) -> int:
    doc = _load_config(args.config)
    if args.checkpoint:
        doc["checkpoint"] = str(args.checkpoint)
    if args.data:
        doc["data_dir"] = str(args.data)
    rc = RunConfig.from_dict(doc)
    params = _load_checkpoint(rc.checkpoint)
    if not rc.data_dir:
        raise UsageError("eval needs --data")
    _, splits = _load_corpus(Path(rc.data_dir))
    out = _output_dir(args.out, rc, "eval")
    out.mkdir(parents=True, exist_ok=True)
    result = {name: evaluate(params, splits[name]).accuracy for name in SPLITS}
    _write_json(out / "eval.json", result)
    _write_json(out / "config.json", rc.snapshot())
    for k, v in result.items():
        print(f"{k:20s} {v:.4f}")
    return 0


def cmd_analyze(args) -> int:
    doc = _load_config(args.config)
    if args.checkpoint:
        doc["checkpoint"] = str(args.checkpoint)
    if args.data:
        doc["data_dir"] = str(args.data)
    names = [n for a in (args.analysis or []) for n in a.split(",") if n]
    names += [n for n in ANALYSES if getattr(args, "flag_" + n.replace("-", "_"))]
    if names:
        doc["analyses"] = list(dict.fromkeys(names))
    an = dict(doc.get("analysis") or {})
    if args.rates:
        # --rates serves whichever of drop-curve / perturb is selected
        an["rates"] = _parse_floats(args.rates)
        if not args.perturb_rates:
            an["perturb_rates"] = an["rates"]
    if args.perturb_rates:
        an["perturb_rates"] = _parse_floats(args.perturb_rates)
    for flag, key in (("n", "n_datasets"), ("split", "split"), ("n_bins", "n_bins"), ("analysis_seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            an[key] = v
    if args.mapping:
        an["mapping"] = json.loads(args.mapping)
    doc["analysis"] = an
    rc = RunConfig.from_dict(doc)
    if not rc.analyses:
        raise UsageError(f"no analysis selected; valid names: {', '.join(ANALYSES)}")
    acfg = rc.analysis_config()
    params = _load_checkpoint(rc.checkpoint)
    if not rc.data_dir:
        raise UsageError("analyze needs --data")
    _, splits = _load_corpus(Path(rc.data_dir))
    if acfg.split not in splits:
        raise UsageError(f"unknown split {acfg.split!r}")
    split = splits[acfg.split]
    tdt_cfg = TDTConfig.from_dict(rc.tdt) if rc.tdt else None
    out = _output_dir(args.out, rc, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    digest = params.digest()

    for name in rc.analyses:
        if name == "drop-curve":
            scores = A.token_confidences(params, split)
            curves = [A.drop_curve(params, split, order, acfg.rates, acfg.normalization, scores)
                      for order in A.ORDERS]
            A.write_curves_csv(curves, out / "drop_curve.csv")
        elif name == "perturb":
            reports = [A.perturb_eval(params, split, r, acfg.n_datasets, acfg.seed) for r in acfg.perturb_rates]
            A.write_reports_csv(reports, out / "perturb.csv")
        elif name == "histogram":
            A.write_histogram_csv(A.confidence_histogram(params, split, acfg.n_bins), out / "histogram.csv")
        elif name == "export-reprs":
            A.export_representations(params, split, out / "representations.csv", tdt_cfg)
        elif name == "domain-eval":
            mapping = None if acfg.mapping is None else {int(k): int(v) for k, v in acfg.mapping.items()}
            acc = A.domain_eval(params, splits[acfg.ood_split], mapping)
            _write_json(out / "domain_eval.json", {"split": acfg.ood_split, "accuracy": acc,
                                                   "mapping": acfg.mapping})
        print(f"{name}: done")
    if params.digest() != digest:
        raise RuntimeFailure("analysis modified model parameters")
    _write_json(out / "config.json", rc.snapshot())
    return 0


def tiny_gradcheck_setup(variant: str = "soft", seed: int = 0):
    """Random tiny model (d_model 8, 2 layers, vocab 50, length 12) and batch."""
    cfg = ModelConfig(vocab_size=50, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=12, n_classes=3,
                      conf_head=variant, init_std=0.5)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for name in params.names():
        # nonzero biases and gains so every parameter path is exercised
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf.endswith("_b") or leaf.endswith("_g"):
            params[name].data = params[name].data + rng.normal(0.0, 0.3, params[name].shape)
    lengths = [10, 7, 4, 9]
    toks = [list(rng.integers(4, cfg.vocab_size, size=n)) for n in lengths]
    batch = encode_batch(toks, rng.integers(0, cfg.n_classes, size=len(lengths)), cfg)
    return params, batch


def run_gradcheck(variant: str = "soft", h: float = 1e-5, tol: float = 1e-4, n_samples: int = 3,
                  seed: int = 0, grid=GRID) -> list[dict]:
    """Check L_cla, L_C, L_R and the total for every grid combination.

    Returns rows of (m, alpha, beta, loss, group, max_rel_error). In hard mode
    the check runs through the relaxed (tempered-softmax) path with frozen
    Gumbel noise; the straight-through estimator itself is not FD-checkable.
    """
    params, batch = tiny_gradcheck_setup(variant, seed)
    rows = []
    for m, a, b in grid:
        cfg = TDTConfig(m=m, alpha=a, beta=b, gamma=0.1, variant_mode=variant,
                        perturbation_mode="embedding_mean", tau=1.0)

        def losses():
            rng = np.random.default_rng(seed + 1)
            bundle = total_loss(batch, params, cfg, rng, straight_through=(variant == "soft"))
            return {"l_cla": bundle.l_cla, "l_c": bundle.l_c, "l_r": bundle.l_r, "total": bundle.total}

        reports = grad_check_many(losses, params.values(), h=h, tol=tol, n_samples=n_samples,
                                  rng=np.random.default_rng(seed + 2), names=params.names())
        for loss_name, rep in reports.items():
            for group, err in sorted(rep.group_errors(param_group).items()):
                rows.append({"m": m, "alpha": a, "beta": b, "loss": loss_name, "group": group,
                             "max_rel_error": err, "skipped": rep.n_skipped})
    return rows


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    try:
        rows = run_gradcheck(args.variant, args.h, args.tol, args.samples, args.seed)
    except GradCheckError as e:
        raise RuntimeFailure(str(e)) from e
    worst: dict[tuple[str, str], float] = {}
    for r in rows:
        key = (r["loss"], r["group"])
        worst[key] = max(worst.get(key, 0.0), r["max_rel_error"])
    print(f"{'loss':8s} {'group':12s} max_rel_error (over {len(GRID)} grid points, h={args.h})")
    failing = []
    for (loss, group), err in sorted(worst.items()):
        ok = err < args.tol
        print(f"{loss:8s} {group:12s} {err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failing.append(f"{loss}/{group}")
    if args.variant == "hard":
        print("note: straight-through estimator unchecked by finite differences; "
              "checked the tempered-softmax relaxation with frozen noise")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", rows)
    if failing:
        print("FAILED groups: " + ", ".join(failing), file=sys.stderr)
        return 2
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write the four JSONL splits and a manifest")
    g.add_argument("--config")
    g.add_argument("--spec", help="task spec JSON")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--sizes", help="e.g. train=8000,dev=1000")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train vanilla or regularized models")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--margin", type=float)
    t.add_argument("--variant", choices=("soft", "hard"))
    t.add_argument("--perturb", choices=("zero", "gaussian", "embedding_mean", "sequence_mean"))
    t.add_argument("--tau", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--total-steps", dest="total_steps", type=int)
    t.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--eval-interval", dest="eval_interval", type=int)
    t.add_argument("--record-timing", action="store_true", help="store wall-clock in run_record.json")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on every split")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="run diagnostic protocols")
    a.add_argument("--config")
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--analysis", action="append", help=f"one of {', '.join(ANALYSES)} (repeatable)")
    for n in ANALYSES:
        a.add_argument("--" + n, dest="flag_" + n.replace("-", "_"), action="store_true",
                       help=f"same as --analysis {n}")
    a.add_argument("--rates", help='comma list or range such as "0.1..0.5"')
    a.add_argument("--perturb-rates", dest="perturb_rates")
    a.add_argument("--n", type=int, help="datasets per perturbation rate")
    a.add_argument("--split")
    a.add_argument("--n-bins", dest="n_bins", type=int)
    a.add_argument("--analysis-seed", dest="analysis_seed", type=int)
    a.add_argument("--mapping", help='JSON label map, e.g. {"0": 1, "1": 0}')
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--variant", choices=("soft", "hard"), default="soft")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--samples", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeFailure, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
