"""Alignment quality measurement: per-pair R^2, n-nearest-neighbor accuracy
against a dictionary, embedding export, and a 2D PCA projection for plots.

Everything here is read-only over plain arrays; reserved tokens never enter
exports, neighbor indices, or projections.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dictionary, N_RESERVED, Vocab
from .transformer import ModelParams


class ConstantTargetError(ValueError):
    """R^2 is undefined when the target vector has zero variance."""


@dataclass
class EmbeddingView:
    """Content words (reserved tokens stripped) plus their vectors."""

    language: str
    words: list[str]
    matrix: np.ndarray  # [n_words, dim]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def vector(self, word: str) -> np.ndarray:
        return self.matrix[self.index[word]]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def view_from_params(params: ModelParams, vocab: Vocab, side: str) -> EmbeddingView:
    table = params.source_embedding if side == "source" else params.target_embedding
    return EmbeddingView(language=vocab.language,
                         words=vocab.content_words,
                         matrix=table.weight.data[N_RESERVED:].copy())


class NeighborIndex:
    """Exact nearest-neighbor retrieval over an embedding matrix.

    Queries return row indices sorted by descending similarity, ties broken
    by ascending row id (argsort stability provides the tie rule).
    """

    def __init__(self, matrix: np.ndarray, metric: str = "cosine"):
        if metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {metric!r}")
        self.metric = metric
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if metric == "cosine":
            norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
            self._unit = self.matrix / np.where(norms > 0.0, norms, 1.0)

    def similarities(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64)
        if self.metric == "cosine":
            norm = np.linalg.norm(query)
            unit_q = query / norm if norm > 0.0 else query
            return self._unit @ unit_q
        return -np.linalg.norm(self.matrix - query, axis=1)

    def query(self, vec: np.ndarray, n: int) -> np.ndarray:
        sims = self.similarities(vec)
        return np.argsort(-sims, kind="stable")[:n]


def pair_r2(x_s: np.ndarray, x_t: np.ndarray) -> float:
    """Coefficient of determination of the source vector as a prediction of
    the target vector over its coordinates:
    R^2 = 1 - |x_s - x_t|^2 / |x_t - mean(x_t)|^2."""
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_s.shape != x_t.shape or x_s.ndim != 1 or x_s.size < 2:
        raise ValueError(f"pair_r2 needs two equal-length vectors of dim >= 2, "
                         f"got {x_s.shape} and {x_t.shape}")
    total = float(np.sum((x_t - x_t.mean()) ** 2))
    if total == 0.0:
        raise ConstantTargetError("target vector is constant; R^2 undefined")
    residual = float(np.sum((x_s - x_t) ** 2))
    return 1.0 - residual / total


def _valid_pairs(dictionary: Dictionary, src: EmbeddingView, tgt: EmbeddingView):
    return [(s, t) for s, t in dictionary.pairs if s in src and t in tgt]


def avg_r2(dictionary: Dictionary, src: EmbeddingView, tgt: EmbeddingView):
    """Mean pair_r2 over in-vocabulary pairs.

    Returns (average, coverage, n_used); pairs with a constant target vector
    are skipped and excluded from n_used.
    """
    if len(dictionary) == 0:
        raise ValueError("avg_r2: empty dictionary")
    valid = _valid_pairs(dictionary, src, tgt)
    if not valid:
        raise ValueError("avg_r2: no dictionary pair is covered by both vocabularies")
    values = []
    for s, t in valid:
        try:
            values.append(pair_r2(src.vector(s), tgt.vector(t)))
        except ConstantTargetError:
            continue
    if not values:
        raise ValueError("avg_r2: every covered pair has a constant target vector")
    coverage = len(valid) / len(dictionary)
    return float(np.mean(values)), coverage, len(values)


def knn_accuracy(dictionary: Dictionary, src: EmbeddingView, tgt: EmbeddingView,
                 n: int, metric: str = "cosine",
                 index: NeighborIndex | None = None) -> float:
    """Fraction of covered source words whose top-n target neighbors contain
    at least one of their dictionary translations. A source word with
    several translations is credited if any appears."""
    if len(dictionary) == 0:
        raise ValueError("knn_accuracy: empty dictionary")
    valid = _valid_pairs(dictionary, src, tgt)
    if not valid:
        raise ValueError("knn_accuracy: no dictionary pair is covered by both vocabularies")
    translations: dict[str, set[int]] = {}
    for s, t in valid:
        translations.setdefault(s, set()).add(tgt.index[t])
    if index is None:
        index = NeighborIndex(tgt.matrix, metric)
    hits = 0
    for s, gold_rows in translations.items():
        top = index.query(src.vector(s), n)
        if gold_rows.intersection(top.tolist()):
            hits += 1
    return hits / len(translations)


@dataclass
class EvalReport:
    avg_r2: float
    acc1: float
    acc5: float
    acc10: float
    coverage: float
    n_pairs: int

    KEYS = ("avg_r2", "acc1", "acc5", "acc10", "coverage", "n_pairs")

    def lines(self) -> list[str]:
        return [f"{key}={getattr(self, key)!r}" for key in self.KEYS]

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def build_report(dictionary: Dictionary, src: EmbeddingView, tgt: EmbeddingView,
                 metric: str = "cosine") -> EvalReport:
    average, coverage, n_used = avg_r2(dictionary, src, tgt)
    index = NeighborIndex(tgt.matrix, metric)
    acc = {n: knn_accuracy(dictionary, src, tgt, n, metric, index)
           for n in (1, 5, 10)}
    # neighbor sets nest, so accuracy can never decrease in n
    assert acc[1] <= acc[5] <= acc[10], "accuracy nesting violated"
    return EvalReport(avg_r2=average, acc1=acc[1], acc5=acc[5], acc10=acc[10],
                      coverage=coverage, n_pairs=n_used)


def export_embeddings(view: EmbeddingView, path):
    """word2vec-style text export: 'count dim' header then one word + vector
    per line, full double precision (round-trips bitwise)."""
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(f"{len(view.words)} {view.dim}\n")
            for word, row in zip(view.words, view.matrix):
                fh.write(word + " " + " ".join(repr(v) for v in row.tolist()) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc


def load_embeddings(path, language: str = "") -> EmbeddingView:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed header")
        count, dim = int(header[0]), int(header[1])
        words, rows = [], []
        for line in fh:
            fields = line.rstrip("\n").split(" ")
            if len(fields) != dim + 1:
                raise ValueError(f"{path}: bad row for word {fields[0]!r}")
            words.append(fields[0])
            rows.append([float(v) for v in fields[1:]])
    if len(words) != count:
        raise ValueError(f"{path}: header count {count} != {len(words)} rows")
    return EmbeddingView(language=language or path.stem, words=words,
                         matrix=np.array(rows, dtype=np.float64))


def project_2d(views: list[EmbeddingView], word_subsets: list[list[str]] | None = None,
               dictionary_words: set[tuple[str, str]] | None = None):
    """Top-2 PCA of the mean-centered concatenation of the selected vectors
    from every view; returns (word, language, x, y, is_dictionary_word)
    records for external plotting."""
    selected: list[tuple[str, str, np.ndarray]] = []
    for i, view in enumerate(views):
        words = view.words if word_subsets is None else word_subsets[i]
        for w in words:
            if w in view:
                selected.append((w, view.language, view.vector(w)))
    if len(selected) < 3:
        raise ValueError("project_2d needs at least 3 vectors")
    data = np.stack([v for _, _, v in selected])
    centered = data - data.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if len(singular) < 2 or singular[1] <= 1e-12 * max(singular[0], 1.0):
        raise ValueError("project_2d: input has rank < 2")
    coords = centered @ vt[:2].T
    dict_words = dictionary_words or set()
    return [
        (word, lang, float(x), float(y), (word, lang) in dict_words)
        for (word, lang, _), (x, y) in zip(selected, coords)
    ]


def write_projection(records, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("word\tlanguage\tx\ty\tis_dictionary_word\n")
        for word, lang, x, y, flag in records:
            fh.write(f"{word}\t{lang}\t{x!r}\t{y!r}\t{int(flag)}\n")
