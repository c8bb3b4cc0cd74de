"""Vocabulary, TSV datasets, the labeled-fraction batch sampler and a synthetic task."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .model import TokenBatch
from .tensor import Rng

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        if len(self.ids) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    @classmethod
    def build(cls, texts) -> "Vocab":
        """Frequency descending, ties broken lexicographically."""
        counts = Counter(tok for text in texts for tok in split_words(text))
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(list(RESERVED) + [t for t in ordered if t not in RESERVED])

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def get(self, token: str) -> int:
        return self.ids.get(token, UNK)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocab, max_len: int = 256) -> list[int]:
    """[CLS] followed by word ids, truncated so the total length is at most ``max_len``."""
    ids = [CLS] + [vocab.get(t) for t in split_words(text)]
    return ids[:max_len]


@dataclass
class Example:
    index: int
    token_ids: list[int]
    label: int | None = None
    hidden_label: int | None = None

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class Dataset:
    examples: list[Example]
    vocab: Vocab
    n_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.array([e.index for e in self.examples if e.labeled], dtype=np.int64)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.array([e.index for e in self.examples if not e.labeled], dtype=np.int64)

    def without_unlabeled(self) -> "Dataset":
        # keeps global indices intact
        return Dataset([e for e in self.examples if e.labeled], self.vocab, self.n_classes, self.meta)

    def by_index(self, i: int) -> Example:
        return self._index[i]

    def __post_init__(self):
        self._index = {e.index: e for e in self.examples}
        if len(self._index) != len(self.examples):
            raise DataError("example indices must be unique")


@dataclass
class Batch:
    tokens: TokenBatch
    labels: np.ndarray      # int64 [b], -1 where unlabeled
    label_mask: np.ndarray  # bool [b]
    indices: np.ndarray     # int64 [b], global example indices

    def __len__(self):
        return len(self.indices)


def collate(examples: list[Example]) -> Batch:
    L = max(len(e.token_ids) for e in examples)
    ids = np.full((len(examples), L), PAD, dtype=np.int64)
    mask = np.zeros((len(examples), L), dtype=bool)
    for r, e in enumerate(examples):
        ids[r, : len(e.token_ids)] = e.token_ids
        mask[r, : len(e.token_ids)] = True
    labels = np.array([-1 if e.label is None else e.label for e in examples], dtype=np.int64)
    return Batch(TokenBatch(ids, mask), labels, labels >= 0,
                 np.array([e.index for e in examples], dtype=np.int64))


def iter_batches(dataset: Dataset, batch_size: int = 64):
    for s in range(0, len(dataset), batch_size):
        yield collate(dataset.examples[s: s + batch_size])


class _Pool:
    """Without-replacement cycling over a fixed index set."""

    def __init__(self, indices: np.ndarray, gen: np.random.Generator):
        self.indices = indices
        self.gen = gen
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.passes = 0

    def _reshuffle(self, avoid=()):
        order = self.gen.permutation(self.indices)
        if len(avoid):
            # items already in the current batch go last so they are not drawn twice
            late = np.isin(order, avoid)
            order = np.concatenate([order[~late], order[late]])
        self.order, self.pos = order, 0
        self.passes += 1

    def take(self, n: int, top_up: bool) -> np.ndarray:
        if self.pos >= len(self.order):
            self._reshuffle()
        out = self.order[self.pos: self.pos + n]
        self.pos += len(out)
        if top_up and len(out) < n:
            self._reshuffle(avoid=out)
            extra = self.order[: n - len(out)]
            self.pos = len(extra)
            out = np.concatenate([out, extra])
        return out

    def state(self) -> dict:
        return {"order": self.order.tolist(), "pos": self.pos, "passes": self.passes}

    def load(self, s: dict) -> None:
        self.order = np.array(s["order"], dtype=np.int64)
        self.pos, self.passes = s["pos"], s["passes"]


def labeled_per_batch(batch_size: int, labeled_frac: float) -> int:
    return max(1, int(math.floor(labeled_frac * batch_size + 0.5)))


class BatchSampler:
    """Mixed batches with a fixed share of labeled examples.

    Epochs follow the labeled pool: the last batch of a labeled pass may hold
    fewer labeled members. The unlabeled pool cycles on its own and always
    fills its share. Without unlabeled data every batch is fully labeled.
    """

    def __init__(self, dataset: Dataset, batch_size: int = 16, labeled_frac: float = 0.25,
                 rng: Rng | None = None):
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < labeled_frac <= 1.0:
            raise ConfigError("labeled_frac must be in (0, 1]")
        labeled = dataset.labeled_indices
        if labeled.size == 0:
            raise ConfigError("dataset has no labeled examples")
        unlabeled = dataset.unlabeled_indices
        self.dataset = dataset
        self.rng = rng or Rng(0)
        if unlabeled.size == 0:
            labeled_frac = 1.0
        self.n_labeled = labeled_per_batch(batch_size, labeled_frac)
        self.n_unlabeled = batch_size - self.n_labeled
        self.labeled = _Pool(labeled, self.rng.gen)
        self.unlabeled = _Pool(unlabeled, self.rng.gen) if self.n_unlabeled else None

    @property
    def epoch(self) -> int:
        return self.labeled.passes

    def next_batch(self) -> Batch:
        idx = self.labeled.take(self.n_labeled, top_up=False)
        if self.unlabeled is not None:
            idx = np.concatenate([idx, self.unlabeled.take(self.n_unlabeled, top_up=True)])
        return collate([self.dataset.by_index(int(i)) for i in idx])

    __next__ = next_batch

    def __iter__(self):
        return self

    def state(self) -> dict:
        return {"rng": self.rng.get_state(), "labeled": self.labeled.state(),
                "unlabeled": self.unlabeled.state() if self.unlabeled else None}

    def load(self, s: dict) -> None:
        self.rng.set_state(s["rng"])
        self.labeled.load(s["labeled"])
        if self.unlabeled is not None:
            self.unlabeled.load(s["unlabeled"])


def sample_batch(sampler: BatchSampler) -> Batch:
    return sampler.next_batch()


# ---------------------------------------------------------------- files


def read_tsv(path) -> list[tuple[int | None, str]]:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    rows = []
    for lineno, line in enumerate(raw.split("\n"), start=1):
        if not line:
            continue
        if "\t" not in line:
            raise ParseError(path, lineno, "expected 'label<TAB>text'")
        label, text = line.split("\t", 1)
        label = label.strip()
        if label == "-":
            rows.append((None, text))
        else:
            try:
                y = int(label)
            except ValueError:
                raise ParseError(path, lineno, f"bad label {label!r}") from None
            if y < 0:
                raise ParseError(path, lineno, f"negative label {y}")
            rows.append((y, text))
    return rows


def dataset_from_rows(rows, vocab: Vocab, max_len: int = 256, start_index: int = 0,
                      n_classes: int | None = None) -> Dataset:
    examples = [Example(start_index + i, tokenize(text, vocab, max_len), y)
                for i, (y, text) in enumerate(rows)]
    seen = [y for y, _ in rows if y is not None]
    k = n_classes or max(2, max(seen, default=1) + 1)
    if seen and max(seen) >= k:
        raise DataError(f"label {max(seen)} outside [0, {k})")
    return Dataset(examples, vocab, k)


def load_tsv(path, vocab: Vocab | None = None, max_len: int = 256, start_index: int = 0,
             n_classes: int | None = None) -> Dataset:
    """One example per line; the i-th line becomes example ``start_index + i``."""
    rows = read_tsv(path)
    vocab = vocab or Vocab.build(text for _, text in rows)
    return dataset_from_rows(rows, vocab, max_len, start_index, n_classes)


def write_tsv(path, dataset: Dataset, hide_labels: bool = False) -> None:
    lines = []
    for e in dataset.examples:
        text = " ".join(dataset.vocab.tokens[i] for i in e.token_ids[1:])
        label = "-" if (e.label is None or hide_labels) else str(e.label)
        lines.append(f"{label}\t{text}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


# ---------------------------------------------------------------- synthetic task

N_LEXICON = 5
# (majority, minority) lexicon-token counts; the majority side decides the class
_LEXICON_MIX = ((1, 0), (2, 0), (2, 1), (3, 1), (3, 2))


def synthetic_vocab(vocab_size: int) -> Vocab:
    n_free = vocab_size - len(RESERVED) - 2 * N_LEXICON
    return Vocab(list(RESERVED) + [f"pos{i}" for i in range(N_LEXICON)]
                 + [f"neg{i}" for i in range(N_LEXICON)] + [f"w{i:03d}" for i in range(n_free)])


def lexicon_ids(vocab_size: int):
    base = len(RESERVED)
    pos = np.arange(base, base + N_LEXICON)
    neg = np.arange(base + N_LEXICON, base + 2 * N_LEXICON)
    return pos, neg, np.arange(base + 2 * N_LEXICON, vocab_size)


def lexicon_rule(token_ids, vocab_size: int = 100) -> int:
    """Class 1 iff positive-lexicon tokens outnumber negative ones."""
    pos, neg, _ = lexicon_ids(vocab_size)
    ids = np.asarray(token_ids)
    return int(np.isin(ids, pos).sum() > np.isin(ids, neg).sum())


def _synthetic_examples(n: int, vocab_size: int, seq_len: int, gen, start: int) -> list[Example]:
    pos, neg, free = lexicon_ids(vocab_size)
    labels = np.arange(n) % 2
    gen.shuffle(labels)
    out = []
    for i, y in enumerate(labels):
        major, minor = _LEXICON_MIX[gen.integers(len(_LEXICON_MIX))]
        length = int(gen.integers(6, seq_len))  # content tokens; [CLS] makes it <= seq_len
        mine, theirs = (pos, neg) if y == 1 else (neg, pos)
        toks = np.concatenate([gen.choice(mine, major), gen.choice(theirs, minor),
                               gen.choice(free, length - major - minor)])
        gen.shuffle(toks)
        out.append(Example(start + i, [CLS] + toks.tolist(), int(y), int(y)))
    return out


def generate_synthetic(n_labeled: int, n_unlabeled: int, n_test: int, vocab_size: int = 100,
                       seq_len: int = 16, seed: int = 0):
    """Binary lexicon-majority task; returns (train, test).

    Train holds ``n_labeled`` labeled examples followed by ``n_unlabeled`` whose
    labels are stripped (kept in ``hidden_label`` for diagnostics).
    """
    if vocab_size <= 2 * N_LEXICON + len(RESERVED):
        raise ConfigError(f"vocab_size must exceed {2 * N_LEXICON + len(RESERVED)}")
    if seq_len < 7:
        raise ConfigError("seq_len must be at least 7")
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(7,))))
    vocab = synthetic_vocab(vocab_size)
    train = _synthetic_examples(n_labeled, vocab_size, seq_len, gen, 0)
    unlabeled = _synthetic_examples(n_unlabeled, vocab_size, seq_len, gen, n_labeled)
    for e in unlabeled:
        e.label = None
    train += unlabeled
    test = _synthetic_examples(n_test, vocab_size, seq_len, gen, 0)
    meta = {"generator": "lexicon-majority", "n_labeled": n_labeled, "n_unlabeled": n_unlabeled,
            "n_test": n_test, "vocab_size": vocab_size, "seq_len": seq_len, "seed": seed}
    return Dataset(train, vocab, 2, meta), Dataset(test, vocab, 2, meta)
