"""Corpus handling: tokenization, filtering, vocabularies, token-budget
batching, dictionary files, and the synthetic cipher corpus.

All functions are pure over their inputs; randomness always comes from an
explicit seed.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]
N_RESERVED = len(RESERVED_TOKENS)

# a token is a run of word characters or a single punctuation character
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DictionaryFormatError(ValueError):
    """Malformed dictionary file; message carries path and line number."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class SentencePair:
    source_tokens: list[str]
    target_tokens: list[str]
    source_ids: list[int] | None = None
    target_ids: list[int] | None = None


@dataclass
class Vocab:
    """Word/id bijection for one language; ids 0..3 are PAD/BOS/EOS/UNK."""

    language: str
    words: list[str]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_content_words(cls, language: str, content_words: list[str]) -> "Vocab":
        words = RESERVED_TOKENS + list(content_words)
        return cls(language=language, words=words,
                   index={w: i for i, w in enumerate(words)})

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    def __contains__(self, word: str) -> bool:
        return word in self.index and self.index[word] >= N_RESERVED

    @property
    def content_words(self) -> list[str]:
        return self.words[N_RESERVED:]

    def encode(self, tokens: list[str]) -> list[int]:
        return [BOS_ID] + [self.id_of(t) for t in tokens] + [EOS_ID]

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids
                if i not in (PAD_ID, BOS_ID, EOS_ID)]


@dataclass
class Batch:
    """Padded id matrices for a group of sentence pairs.

    ``token_count`` counts non-pad target tokens, the quantity the batching
    budget is expressed in.
    """

    source: np.ndarray
    target: np.ndarray
    source_lengths: np.ndarray
    target_lengths: np.ndarray
    token_count: int

    def __len__(self) -> int:
        return self.source.shape[0]


@dataclass
class Dictionary:
    """Evaluation word pairs; a source word may carry several targets."""

    pairs: list[tuple[str, str]]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


def filter_pairs(pairs, max_len: int = 80, max_ratio: float = 1.5):
    """Keep pairs with both sides non-empty, both lengths <= max_len and a
    symmetric length ratio max/min <= max_ratio. Order preserved."""
    kept = []
    for p in pairs:
        ls, lt = len(p.source_tokens), len(p.target_tokens)
        if ls == 0 or lt == 0:
            continue
        if ls > max_len or lt > max_len:
            continue
        if max(ls, lt) / min(ls, lt) > max_ratio:
            continue
        kept.append(p)
    return kept


def split_train_valid(pairs, fraction: float = 0.9, seed: int = 0):
    """Seeded shuffle then split; returns (train, valid), disjoint and
    exhaustive."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(pairs)
    if n < 2:
        raise ValueError(f"need at least 2 pairs to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * fraction))
    cut = min(max(cut, 1), n - 1)
    train = [pairs[i] for i in order[:cut]]
    valid = [pairs[i] for i in order[cut:]]
    return train, valid


def build_vocab(pairs, side: str, min_count: int = 1, language: str | None = None) -> Vocab:
    """Vocabulary from one side of a tokenized corpus, ordered by descending
    count then lexicographic; reserved tokens prepended."""
    if side not in ("source", "target"):
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    counts: Counter = Counter()
    for p in pairs:
        counts.update(p.source_tokens if side == "source" else p.target_tokens)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted((w for w, c in counts.items() if c >= min_count),
                   key=lambda w: (-counts[w], w))
    return Vocab.from_content_words(language or side, words)


def encode_pairs(pairs, src_vocab: Vocab, tgt_vocab: Vocab) -> list[SentencePair]:
    """Attach BOS/EOS-framed id lists to each pair (unknowns map to UNK)."""
    return [
        SentencePair(
            source_tokens=p.source_tokens,
            target_tokens=p.target_tokens,
            source_ids=src_vocab.encode(p.source_tokens),
            target_ids=tgt_vocab.encode(p.target_tokens),
        )
        for p in pairs
    ]


def make_batches(pairs, token_budget: int = 2500, seed: int = 0,
                 bucket_size: int = 256) -> list[Batch]:
    """Token-budget batching: seeded shuffle, sort by target length within
    buckets, then greedy packing. Every pair lands in exactly one batch; a
    single over-budget sentence gets its own batch."""
    if not pairs:
        return []
    for p in pairs:
        if p.source_ids is None or p.target_ids is None:
            raise ValueError("make_batches requires encoded pairs")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]

    batches: list[Batch] = []
    for start in range(0, len(shuffled), bucket_size):
        bucket = shuffled[start:start + bucket_size]
        bucket.sort(key=lambda p: (len(p.target_ids), len(p.source_ids)))
        current: list[SentencePair] = []
        count = 0
        for p in bucket:
            n = len(p.target_ids)
            if current and count + n > token_budget:
                batches.append(_pad_batch(current))
                current, count = [], 0
            current.append(p)
            count += n
        if current:
            batches.append(_pad_batch(current))
    return batches


def _pad_batch(group: list[SentencePair]) -> Batch:
    src_lens = np.array([len(p.source_ids) for p in group], dtype=np.int64)
    tgt_lens = np.array([len(p.target_ids) for p in group], dtype=np.int64)
    src = np.full((len(group), src_lens.max()), PAD_ID, dtype=np.int64)
    tgt = np.full((len(group), tgt_lens.max()), PAD_ID, dtype=np.int64)
    for i, p in enumerate(group):
        src[i, :src_lens[i]] = p.source_ids
        tgt[i, :tgt_lens[i]] = p.target_ids
    return Batch(source=src, target=tgt, source_lengths=src_lens,
                 target_lengths=tgt_lens, token_count=int(tgt_lens.sum()))


def load_dictionary(path, provenance: str = "") -> Dictionary:
    """Read a whitespace-separated two-column word-pair file (the common
    bilingual-dictionary text layout). Duplicates collapse; several targets
    for one source are kept as separate pairs."""
    path = Path(path)
    seen: dict[tuple[str, str], None] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            fields = stripped.split()
            if len(fields) != 2:
                raise DictionaryFormatError(
                    f"{path}:{lineno}: expected 'source target', got {stripped!r}"
                )
            pair = (fields[0].lower(), fields[1].lower())
            seen.setdefault(pair, None)
    return Dictionary(pairs=list(seen.keys()), provenance=provenance or str(path))


def write_dictionary(dictionary: Dictionary, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s, t in dictionary.pairs:
            fh.write(f"{s} {t}\n")


def read_parallel_corpus(source_path, target_path) -> list[SentencePair]:
    """Tokenized pairs from two line-aligned UTF-8 files."""
    src_lines = Path(source_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(target_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"parallel files differ in length: {len(src_lines)} vs {len(tgt_lines)}"
        )
    return [SentencePair(tokenize(s), tokenize(t))
            for s, t in zip(src_lines, tgt_lines)]


def write_parallel_corpus(pairs, source_path, target_path):
    with Path(source_path).open("w", encoding="utf-8") as fs, \
            Path(target_path).open("w", encoding="utf-8") as ft:
        for p in pairs:
            fs.write(" ".join(p.source_tokens) + "\n")
            ft.write(" ".join(p.target_tokens) + "\n")


def synth_cipher_corpus(vocab_size: int, n_sentences: int,
                        length_range: tuple[int, int] = (3, 12),
                        seed: int = 0):
    """Synthetic parallel corpus whose target side is a fixed random token
    bijection of the source side.

    Source tokens are drawn from a Zipf-like unigram distribution (exponent
    1.0) over ``vocab_size`` synthetic words; the returned gold dictionary
    is exactly the bijection. Known-by-construction alignment makes this
    the desk-scale evaluation substrate.
    """
    if vocab_size < 10:
        raise ValueError(f"vocab_size must be >= 10, got {vocab_size}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length_range {length_range}")
    rng = np.random.default_rng(seed)
    width = len(str(vocab_size - 1))
    src_words = [f"s{i:0{width}d}" for i in range(vocab_size)]
    tgt_words = [f"t{i:0{width}d}" for i in range(vocab_size)]
    mapping = rng.permutation(vocab_size)

    # Zipf with exponent 1.0: rank k gets probability ~ 1/k
    weights = 1.0 / np.arange(1, vocab_size + 1)
    probs = weights / weights.sum()

    pairs = []
    for _ in range(n_sentences):
        length = int(rng.integers(lo, hi + 1))
        ids = rng.choice(vocab_size, size=length, p=probs)
        pairs.append(SentencePair(
            source_tokens=[src_words[i] for i in ids],
            target_tokens=[tgt_words[mapping[i]] for i in ids],
        ))
    gold = Dictionary(
        pairs=[(src_words[i], tgt_words[mapping[i]]) for i in range(vocab_size)],
        provenance="synthetic-cipher",
    )
    return pairs, gold
