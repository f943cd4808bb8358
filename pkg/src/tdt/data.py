"""Seeded synthetic corpora with a controllable spurious token per class.

Every example holds ``keywords_per_example`` distinct keywords of its class
(these alone determine the label) plus noise fill. In train/dev/test_iid an
example of a designated class also carries that class's spurious token with
probability ``rho``; other examples never carry one, so the token is a
perfectly precise but redundant cue during training. In test_antispurious an
example carries, with probability ``rho``, the spurious token of a
*different* designated class.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test_iid", "test_antispurious")
FLAGS = ("keyword", "spurious", "noise")
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")
_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


class SpecError(ValueError):
    pass


class ParseError(ValueError):
    pass


def pseudo_word(i: int) -> str:
    """Deterministic pronounceable word for token id ``i``."""
    syll = []
    n = i
    while True:
        n, r = divmod(n, len(_CONSONANTS) * len(_VOWELS))
        syll.append(_CONSONANTS[r // len(_VOWELS)] + _VOWELS[r % len(_VOWELS)])
        if n == 0:
            break
        n -= 1
    return "".join(reversed(syll))


@dataclass
class TaskSpec:
    n_classes: int = 4
    keywords: list[list[int]] = field(default_factory=list)
    # class index -> spurious token id; JSON stores keys as strings
    spurious: dict[int, int] = field(default_factory=dict)
    rho: float = 0.95
    keywords_per_example: int = 2
    min_len: int = 8
    max_len: int = 24
    vocab_size: int = 2000
    class_prior: list[float] | None = None
    n_special: int = len(SPECIAL_TOKENS)

    def __post_init__(self):
        self.spurious = {int(k): int(v) for k, v in self.spurious.items()}
        self.keywords = [[int(t) for t in ks] for ks in self.keywords]

    @classmethod
    def default(cls, n_classes: int = 4, keywords_per_class: int = 5, vocab_size: int = 2000,
                **kw) -> "TaskSpec":
        start = len(SPECIAL_TOKENS)
        keywords = [list(range(start + c * keywords_per_class, start + (c + 1) * keywords_per_class))
                    for c in range(n_classes)]
        nxt = start + n_classes * keywords_per_class
        spurious = {c: nxt + c for c in range(n_classes)}
        spec = cls(n_classes=n_classes, keywords=keywords, spurious=spurious, vocab_size=vocab_size, **kw)
        spec.validate()
        return spec

    @property
    def noise_tokens(self) -> np.ndarray:
        used = {t for ks in self.keywords for t in ks} | set(self.spurious.values())
        return np.array([t for t in range(self.n_special, self.vocab_size) if t not in used], dtype=np.int64)

    @property
    def prior(self) -> np.ndarray:
        if self.class_prior is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.class_prior, dtype=np.float64)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise SpecError("need at least 2 classes")
        if len(self.keywords) != self.n_classes:
            raise SpecError("one keyword list per class is required")
        if not 0.0 <= self.rho <= 1.0:
            raise SpecError(f"rho must lie in [0, 1], got {self.rho}")
        if self.keywords_per_example < 1:
            raise SpecError("keywords_per_example must be >= 1")
        if any(len(ks) < self.keywords_per_example for ks in self.keywords):
            raise SpecError("a class has fewer keywords than keywords_per_example")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError("need 1 <= min_len <= max_len")
        if self.min_len < self.keywords_per_example + (1 if self.spurious else 0):
            raise SpecError("min_len too short to hold keywords and the spurious token")
        flat = [t for ks in self.keywords for t in ks] + list(self.spurious.values())
        if len(set(flat)) != len(flat):
            raise SpecError("keyword and spurious token sets must be pairwise disjoint")
        if any(not self.n_special <= t < self.vocab_size for t in flat):
            raise SpecError(f"task tokens must lie in [{self.n_special}, {self.vocab_size})")
        if any(not 0 <= c < self.n_classes for c in self.spurious):
            raise SpecError("spurious tokens must be keyed by valid class indices")
        if len(self.noise_tokens) < 1:
            raise SpecError("vocabulary too small: no noise tokens left")
        pr = self.prior
        if pr.shape != (self.n_classes,) or (pr < 0).any() or not np.isclose(pr.sum(), 1.0):
            raise SpecError("class_prior must be a distribution over classes")

    def vocab(self) -> list[str]:
        return list(SPECIAL_TOKENS) + [pseudo_word(i) for i in range(self.n_special, self.vocab_size)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spurious"] = {str(k): v for k, v in sorted(self.spurious.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise SpecError(f"unknown task spec keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "TaskSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SpecError(f"{path}: {e}") from e
        return cls.from_dict(doc)


@dataclass
class Example:
    tokens: list[int]
    label: int
    flags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.flags):
            raise ValueError("one provenance flag per token is required")


@dataclass
class Split:
    name: str
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i) -> Example:
        return self.examples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def label_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(ex.label for ex in self.examples).items()))


@dataclass
class CorpusBundle:
    spec: TaskSpec
    seed: int
    sizes: dict[str, int]
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def _draw_example(spec: TaskSpec, rng: np.random.Generator, noise: np.ndarray, anti: bool) -> Example:
    label = int(rng.choice(spec.n_classes, p=spec.prior))
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    kws = rng.choice(spec.keywords[label], size=spec.keywords_per_example, replace=False)
    tokens = [int(t) for t in kws]
    flags = ["keyword"] * len(tokens)

    designated = sorted(spec.spurious)
    src = None
    if anti:
        others = [c for c in designated if c != label]
        if others and rng.random() < spec.rho:
            src = int(rng.choice(others))
    elif label in spec.spurious and rng.random() < spec.rho:
        src = label
    if src is not None:
        tokens.append(spec.spurious[src])
        flags.append("spurious")

    n_noise = length - len(tokens)
    tokens.extend(int(t) for t in rng.choice(noise, size=n_noise))
    flags.extend(["noise"] * n_noise)
    order = rng.permutation(length)
    return Example([tokens[i] for i in order], label, [flags[i] for i in order])


def generate_split(spec: TaskSpec, name: str, size: int, rng: np.random.Generator) -> Split:
    noise = spec.noise_tokens
    anti = name == "test_antispurious"
    return Split(name, [_draw_example(spec, rng, noise, anti) for _ in range(size)])


DEFAULT_SIZES = {"train": 8000, "dev": 1000, "test_iid": 1000, "test_antispurious": 1000}


def generate_corpus(spec: TaskSpec, sizes: dict[str, int] | None = None, seed: int = 0) -> CorpusBundle:
    """Generate all four splits; each split has its own child seed stream."""
    spec.validate()
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    unknown = set(sizes) - set(SPLITS)
    if unknown:
        raise SpecError(f"unknown split names: {sorted(unknown)}")
    if any(sizes.get(s, 0) < 1 for s in SPLITS):
        raise SpecError("every split size must be positive")
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    splits = {name: generate_split(spec, name, sizes[name], np.random.default_rng(ss))
              for name, ss in zip(SPLITS, streams)}
    return CorpusBundle(spec, seed, sizes, splits)


def subsample(split: Split, k: int, seed: int) -> Split:
    """Uniform sample of ``k`` examples without replacement (original order kept)."""
    if k > len(split):
        raise ValueError(f"cannot sample {k} examples from a split of {len(split)}")
    if k < 0:
        raise ValueError("k must be non-negative")
    idx = np.sort(np.random.default_rng(seed).choice(len(split), size=k, replace=False))
    out = Split(split.name, [split.examples[i] for i in idx])
    log.info("subsampled %s to %d examples, label counts %s", split.name, k, out.label_counts())
    return out


# -------------------------------------------------------------------- JSONL


def write_jsonl(split: Split, path, vocab: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in split:
            text = [vocab[t] for t in ex.tokens] if vocab is not None else [pseudo_word(t) for t in ex.tokens]
            fh.write(json.dumps({"tokens": ex.tokens, "text": text, "label": ex.label, "flags": ex.flags}) + "\n")


def read_jsonl(path, name: str | None = None) -> Split:
    path = Path(path)
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            for key in ("tokens", "label", "flags"):
                if key not in obj:
                    raise ParseError(f"{path}:{lineno}: missing field {key!r}")
            try:
                examples.append(Example([int(t) for t in obj["tokens"]], int(obj["label"]), list(obj["flags"])))
            except (TypeError, ValueError) as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
    return Split(name or path.stem, examples)


# ---------------------------------------------------------------- oracles


def label_map(predictions, mapping: dict[int, int]) -> np.ndarray:
    """Apply a many-to-one label mapping; every prediction must be mapped."""
    preds = np.asarray(predictions, dtype=np.int64)
    missing = sorted({int(p) for p in preds} - set(mapping))
    if missing:
        raise KeyError(f"unmapped labels: {missing}")
    return np.array([mapping[int(p)] for p in preds], dtype=np.int64)


def keyword_oracle(split: Split, spec: TaskSpec) -> np.ndarray:
    """Rule-based classifier reading only keyword-flagged tokens."""
    owner = {t: c for c, ks in enumerate(spec.keywords) for t in ks}
    out = []
    for ex in split:
        votes = Counter(owner[t] for t, f in zip(ex.tokens, ex.flags) if f == "keyword")
        out.append(min(votes, key=lambda c: (-votes[c], c)))
    return np.array(out, dtype=np.int64)


def spurious_oracle(split: Split, spec: TaskSpec) -> np.ndarray:
    """Predict the class whose spurious token is present, else class 0."""
    owner = {t: c for c, t in spec.spurious.items()}
    out = []
    for ex in split:
        hits = [owner[t] for t, f in zip(ex.tokens, ex.flags) if f == "spurious"]
        out.append(hits[0] if hits else 0)
    return np.array(out, dtype=np.int64)


def relabel(split: Split, mapping: dict[int, int], name: str | None = None) -> Split:
    """Coarsen a split's labels, e.g. to build a 2-class target domain."""
    labels = label_map(split.labels, mapping)
    return Split(name or f"{split.name}_mapped",
                 [Example(ex.tokens, int(y), ex.flags) for ex, y in zip(split, labels)])
