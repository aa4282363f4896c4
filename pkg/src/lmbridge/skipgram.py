"""Static subword embeddings: skipgram with negative sampling.

The SGD inner loop runs in the compiled kernel (pure-Python fallback when
the extension is absent); sampling uses word2vec's unigram^0.75 noise
table and a 64-bit LCG so runs are bitwise reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from lmbridge import _kernels

_TABLE_SIZE = 1 << 18
_LR_FLOOR = 1e-4


class EmbeddingSpace:
    """One vector per vocabulary token."""

    def __init__(self, vectors, vocab=None, normalized=False):
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {self.vectors.shape}")
        self.vocab = vocab
        self.normalized = normalized

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def row(self, idx):
        return self.vectors[idx]

    def normalize(self):
        """Copy with unit-norm rows (zero rows are left as zero)."""
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        safe = np.where(norms == 0.0, 1.0, norms)
        return EmbeddingSpace(self.vectors / safe, vocab=self.vocab, normalized=True)

    def save_text(self, path):
        n, d = self.vectors.shape
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{n} {d}\n")
            for i in range(n):
                name = self.vocab.token_of(i) if self.vocab is not None else f"tok{i}"
                vals = " ".join(repr(v) for v in self.vectors[i])
                fh.write(f"{name} {vals}\n")

    @classmethod
    def load_text(cls, path, vocab=None):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            n, d = int(header[0]), int(header[1])
            vectors = np.zeros((n, d))
            for i in range(n):
                parts = fh.readline().rstrip("\n").split(" ")
                name, vals = parts[0], parts[1:]
                if len(vals) != d:
                    raise ValueError(f"row {i} has {len(vals)} values, expected {d}")
                row = i if vocab is None else vocab.id_of(name)
                vectors[row] = [float(v) for v in vals]
        return cls(vectors, vocab=vocab)


def _flatten(sentences):
    offsets = np.zeros(len(sentences) + 1, dtype=np.int64)
    for i, s in enumerate(sentences):
        offsets[i + 1] = offsets[i] + len(s)
    tokens = np.zeros(int(offsets[-1]), dtype=np.int32)
    for i, s in enumerate(sentences):
        tokens[offsets[i]:offsets[i + 1]] = s
    return tokens, offsets


def _unigram_table(tokens, n_vocab):
    counts = np.bincount(tokens, minlength=n_vocab).astype(np.float64)
    weights = counts ** 0.75
    total = weights.sum()
    if total == 0.0:
        raise ValueError("empty corpus: nothing to sample")
    cumulative = np.cumsum(weights) / total
    grid = np.arange(_TABLE_SIZE) / _TABLE_SIZE
    table = np.searchsorted(cumulative, grid, side="left")
    return np.minimum(table, n_vocab - 1).astype(np.int32)


def train_skipgram(sentences, n_vocab, d, window=5, negatives=5, epochs=5,
                   lr=0.025, seed=0, vocab=None):
    """Train input vectors over tokenized sentences; returns an EmbeddingSpace.

    Learning rate decays linearly over all epochs down to lr * 1e-4.
    """
    if d < 4:
        raise ValueError(f"embedding dim {d} too small (need >= 4)")
    sentences = [s for s in sentences if len(s) > 0]
    if not sentences:
        raise ValueError("empty corpus: no sentences to train on")
    tokens, offsets = _flatten(sentences)
    table = _unigram_table(tokens, n_vocab)

    init_rng = np.random.default_rng(seed)
    vin = (init_rng.random((n_vocab, d)) - 0.5) / d
    vout = np.zeros((n_vocab, d))

    state = (seed * 25214903917 + 11) & ((1 << 64) - 1)
    done = 0
    total = len(tokens) * epochs
    for _ in range(epochs):
        done, state = _kernels.skipgram_pass(
            tokens, offsets, vin, vout, table, window, negatives,
            lr, _LR_FLOOR, done, total, state)
    return EmbeddingSpace(vin, vocab=vocab)


def cosine_matrix(a, b):
    """Cosine similarity between all rows of a and all rows of b."""
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return an @ bn.T


def nearest_neighbors(space, token, k, metric="cosine"):
    """Top-k most-similar rows to `token` by cosine, excluding the query."""
    if metric != "cosine":
        raise ValueError(f"unsupported metric {metric!r}")
    n = len(space)
    if not 0 <= token < n:
        raise IndexError(f"token id {token} out of range for space of {n}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the space size {n}")
    sims = cosine_matrix(space.vectors[token:token + 1], space.vectors)[0]
    sims[token] = -np.inf
    top = np.argsort(-sims, kind="stable")[:k]
    return [(int(i), float(sims[i])) for i in top]
