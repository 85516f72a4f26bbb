"""Synthetic cloze-classification corpora and the nested few-shot protocol.

Sequences are drawn from per-class token pools mixed with a shared
confuser pool, so the exact Bayes-optimal label of every sequence is
computable from the likelihood ratio and stored next to the gold label.
Few-shot splits take prefixes of one per-split permutation, which makes
D10 c D20 c D30 hold by construction.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import math

import numpy as np

from .errors import ConfigError, InputError

PAD, CLS, SEP, MASK = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, CLS, SEP, MASK)
K_LEVELS = (10, 20, 30)


def label_token(i: int) -> str:
    return f"LBL{i}"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    class_pools: tuple[tuple[str, ...], ...]
    confuser_pool: tuple[str, ...]
    noise: float = 0.3
    seq_len: tuple[int, int] = (6, 12)
    train_pool: int = 2030
    test_size: int = 500
    extra_tokens: tuple[str, ...] = ("it", "was")

    def __post_init__(self):
        object.__setattr__(self, "class_pools",
                           tuple(tuple(p) for p in self.class_pools))
        object.__setattr__(self, "confuser_pool", tuple(self.confuser_pool))
        object.__setattr__(self, "seq_len", tuple(self.seq_len))
        object.__setattr__(self, "extra_tokens", tuple(self.extra_tokens))
        if self.n_labels < 2:
            raise ConfigError("need at least two classes")
        pools = [tuple(sorted(p)) for p in self.class_pools]
        for i in range(len(pools)):
            for j in range(i + 1, len(pools)):
                if pools[i] == pools[j]:
                    raise ConfigError(f"class pools {i} and {j} are identical")
        if not all(self.class_pools) or not self.confuser_pool:
            raise ConfigError("empty token pool")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError("noise must lie in [0, 0.5)")
        lo, hi = self.seq_len
        if lo < 1 or hi < lo:
            raise ConfigError("invalid seq_len range")
        if self.train_pool < 1 or self.test_size < 1:
            raise ConfigError("corpus sizes must be positive")

    @property
    def n_labels(self) -> int:
        return len(self.class_pools)

    @property
    def content_tokens(self) -> tuple[str, ...]:
        seen = set()
        for pool in list(self.class_pools) + [self.confuser_pool]:
            seen.update(pool)
        return tuple(sorted(seen))


def default_task_spec(**overrides) -> SyntheticTaskSpec:
    """The frozen default task: two classes of 8 tokens + 8 neutral tokens."""
    pool_a = tuple(f"a{i}" for i in range(8))
    pool_b = tuple(f"b{i}" for i in range(8))
    neutral = tuple(f"n{i}" for i in range(8))
    defaults = dict(class_pools=(pool_a, pool_b),
                    confuser_pool=pool_a + pool_b + neutral)
    defaults.update(overrides)
    return SyntheticTaskSpec(**defaults)


class Vocabulary:
    """Closed token set; id = position in the token list."""

    def __init__(self, tokens: tuple[str, ...]):
        self.tokens = tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate token in vocabulary")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        for t in RESERVED:
            if t not in self._ids:
                raise ConfigError(f"vocabulary must contain {t}")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise InputError(f"unknown token {token!r}") from None

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise InputError(f"token id {i} out of range")
        return self.tokens[i]

    def encode(self, tokens) -> tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.token(i) for i in ids)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def mask_id(self) -> int:
        return self._ids[MASK]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @staticmethod
    def load(path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return Vocabulary(tuple(lines))


def build_vocab(spec: SyntheticTaskSpec) -> Vocabulary:
    tokens = list(RESERVED)
    tokens += [label_token(i) for i in range(spec.n_labels)]
    tokens += [t for t in spec.extra_tokens if t not in tokens]
    tokens += [t for t in spec.content_tokens if t not in tokens]
    return Vocabulary(tuple(tokens))


@dataclass(frozen=True)
class Record:
    tokens: tuple[str, ...]
    gold: int
    bayes: int


@dataclass(frozen=True)
class Corpus:
    spec: SyntheticTaskSpec
    seed: int
    records: tuple[Record, ...]

    @property
    def train_records(self) -> tuple[Record, ...]:
        return self.records[:self.spec.train_pool]

    @property
    def test_records(self) -> tuple[Record, ...]:
        return self.records[self.spec.train_pool:]


def _bayes_label(tokens, spec: SyntheticTaskSpec) -> int:
    """Exact likelihood-ratio label; ties break to the smallest class."""
    conf = Counter(spec.confuser_pool)
    conf_size = len(spec.confuser_pool)
    best, best_ll = 0, -math.inf
    for c, pool in enumerate(spec.class_pools):
        counts = Counter(pool)
        size = len(pool)
        ll = 0.0
        for t in tokens:
            p = ((1.0 - spec.noise) * counts.get(t, 0) / size
                 + spec.noise * conf.get(t, 0) / conf_size)
            if p == 0.0:
                ll = -math.inf
                break
            ll += math.log(p)
        if ll > best_ll:
            best, best_ll = c, ll
    return best


def generate(spec: SyntheticTaskSpec, seed: int) -> Corpus:
    """Draw train_pool + test_size records, storing gold and Bayes labels."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.seq_len
    records = []
    for _ in range(spec.train_pool + spec.test_size):
        gold = int(rng.integers(spec.n_labels))
        length = int(rng.integers(lo, hi + 1))
        pool = spec.class_pools[gold]
        tokens = []
        for _ in range(length):
            if rng.random() < spec.noise:
                tokens.append(spec.confuser_pool[rng.integers(
                    len(spec.confuser_pool))])
            else:
                tokens.append(pool[rng.integers(len(pool))])
        records.append(Record(tokens=tuple(tokens), gold=gold,
                              bayes=_bayes_label(tokens, spec)))
    return Corpus(spec=spec, seed=seed, records=tuple(records))


@dataclass(frozen=True)
class FewShotSpec:
    k: int = 10
    split_ids: tuple[int, ...] = (1, 2, 3, 4, 5)
    seed_base: int = 7700

    def __post_init__(self):
        object.__setattr__(self, "split_ids", tuple(self.split_ids))
        if self.k not in K_LEVELS:
            raise ConfigError(f"k must be one of {K_LEVELS}")
        if not self.split_ids:
            raise ConfigError("need at least one split id")


@dataclass(frozen=True)
class LabeledExample:
    tokens: tuple[str, ...]
    label: int


@dataclass(frozen=True)
class UnlabeledExample:
    # deliberately no label field: the unlabeled partition cannot leak one
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Split:
    split_id: int
    labeled: dict[int, tuple[LabeledExample, ...]]  # by K, nested prefixes
    unlabeled: tuple[UnlabeledExample, ...]
    test: tuple[LabeledExample, ...]
    labeled_indices: dict[int, tuple[int, ...]] = field(repr=False, default=None)
    unlabeled_indices: tuple[int, ...] = field(repr=False, default=None)


def make_split(corpus: Corpus, fs: FewShotSpec, split_id: int) -> Split:
    """Class-balanced nested prefixes of a per-split permutation."""
    spec = corpus.spec
    n_labels = spec.n_labels
    rng = np.random.default_rng([fs.seed_base, split_id])
    by_class: list[list[int]] = [[] for _ in range(n_labels)]
    for idx, rec in enumerate(corpus.train_records):
        by_class[rec.gold].append(idx)
    for lst in by_class:
        rng.shuffle(lst)

    cursors = [0] * n_labels
    prefix: list[int] = []
    labeled_indices: dict[int, tuple[int, ...]] = {}
    block_size = K_LEVELS[0]
    for block, k in enumerate(K_LEVELS):
        base, rem = divmod(block_size, n_labels)
        for c in range(n_labels):
            quota = base + (1 if (c - block) % n_labels < rem else 0)
            if cursors[c] + quota > len(by_class[c]):
                raise ConfigError(
                    f"corpus too small: class {c} lacks labeled examples")
            prefix.extend(by_class[c][cursors[c]:cursors[c] + quota])
            cursors[c] += quota
        labeled_indices[k] = tuple(prefix)

    d30 = set(labeled_indices[K_LEVELS[-1]])
    unlabeled_indices = tuple(i for i in range(len(corpus.train_records))
                              if i not in d30)
    train = corpus.train_records
    labeled = {k: tuple(LabeledExample(train[i].tokens, train[i].gold)
                        for i in idxs)
               for k, idxs in labeled_indices.items()}
    unlabeled = tuple(UnlabeledExample(train[i].tokens)
                      for i in unlabeled_indices)
    test = tuple(LabeledExample(r.tokens, r.gold) for r in corpus.test_records)
    return Split(split_id=split_id, labeled=labeled, unlabeled=unlabeled,
                 test=test, labeled_indices=labeled_indices,
                 unlabeled_indices=unlabeled_indices)


def make_splits(corpus: Corpus, fs: FewShotSpec) -> dict[int, Split]:
    return {sid: make_split(corpus, fs, sid) for sid in fs.split_ids}


# ---------------------------------------------------------------------------
# file formats (versions recorded in the dataset descriptor, dataset.json)

CORPUS_FILE = "corpus.tsv"
VOCAB_FILE = "vocab.txt"
MANIFEST_FILE = "manifest.tsv"
DESCRIPTOR_FILE = "dataset.json"
FORMAT_VERSIONS = {"corpus": 1, "vocab": 1, "manifest": 1}


def write_corpus(corpus: Corpus, path) -> None:
    lines = [f"{' '.join(r.tokens)}\t{r.gold}\t{r.bayes}\n"
             for r in corpus.records]
    Path(path).write_text("".join(lines))


def read_corpus_records(path) -> tuple[Record, ...]:
    records = []
    for line in Path(path).read_text().splitlines():
        text, gold, bayes = line.split("\t")
        records.append(Record(tokens=tuple(text.split(" ")), gold=int(gold),
                              bayes=int(bayes)))
    return tuple(records)


def write_manifest(splits: dict[int, Split], corpus: Corpus, path) -> None:
    lines = []
    test_start = corpus.spec.train_pool
    for i in range(corpus.spec.test_size):
        lines.append(f"test\t{test_start + i}\n")
    for sid in sorted(splits):
        split = splits[sid]
        for k in K_LEVELS:
            for idx in split.labeled_indices[k]:
                lines.append(f"s{sid}:labeled_{k}\t{idx}\n")
        for idx in split.unlabeled_indices:
            lines.append(f"s{sid}:unlabeled\t{idx}\n")
    Path(path).write_text("".join(lines))


def read_manifest(path) -> dict[str, tuple[int, ...]]:
    out: dict[str, list[int]] = {}
    for line in Path(path).read_text().splitlines():
        partition, idx = line.split("\t")
        out.setdefault(partition, []).append(int(idx))
    return {k: tuple(v) for k, v in out.items()}
