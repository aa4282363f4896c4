"""Joint subword vocabulary shared by both languages.

Vocabulary construction is a greedy pair-frequency merge (BPE-style
scoring) over whitespace words, with "##" marking word-internal
continuation pieces.  Encoding is greedy longest-match-first per word;
words that cannot be segmented (or contain characters outside the
retained alphabet) become [UNK].
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[P]")
PAD, UNK, CLS, SEP, MASK, PLACEHOLDER = range(len(SPECIALS))
CONT = "##"


class Vocab:
    """Token <-> id bijection with dense ids; specials occupy ids 0..5."""

    def __init__(self, tokens, counts, alphabet):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.counts = list(counts)
        self.alphabet = set(alphabet)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def id_of(self, token, default=UNK):
        return self._ids.get(token, default)

    def token_of(self, idx):
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} out of range for vocabulary of {len(self.tokens)}")
        return self.tokens[idx]

    def is_special(self, idx):
        return 0 <= idx < len(SPECIALS)

    def save(self, path):
        lines = [f"{t}\t{c}\n" for t, c in zip(self.tokens, self.counts)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path):
        tokens, counts = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            tok, _, cnt = line.partition("\t")
            tokens.append(tok)
            counts.append(int(cnt))
        alphabet = {t for t in tokens[len(SPECIALS):] if len(t) == 1}
        return cls(tokens, counts, alphabet)


def _word_counts(corpora):
    counts = Counter()
    for path in corpora:
        text = Path(path).read_text(encoding="utf-8")
        for line in text.splitlines():
            counts.update(line.split())
    return counts


def train_wordpiece(corpora, vocab_size, alphabet_limit, seed=0):
    """Build a joint subword vocabulary of at most `vocab_size` tokens.

    Deterministic given the corpora contents (order of files and of the
    `seed` argument do not affect the result; ties break lexicographically).
    """
    words = _word_counts(corpora if isinstance(corpora, (list, tuple)) else [corpora])
    if not words:
        raise ValueError("empty corpus: no words to train on")

    char_counts = Counter()
    for word, c in words.items():
        for ch in word:
            char_counts[ch] += c
    ranked = sorted(char_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    alphabet = {ch for ch, _ in ranked[:alphabet_limit]}

    # Words with out-of-alphabet characters cannot be segmented; they play
    # no part in merge statistics and will encode to [UNK].
    pieces = {}
    for word, c in words.items():
        if all(ch in alphabet for ch in word):
            pieces[word] = [word[0]] + [CONT + ch for ch in word[1:]]

    base = []
    for ch in sorted(alphabet):
        base.append(ch)
        base.append(CONT + ch)
    floor = len(SPECIALS) + len(base)
    if vocab_size < floor + 1:
        raise ValueError(
            f"vocab_size {vocab_size} below alphabet + specials floor {floor}")

    vocab_tokens = list(SPECIALS) + base
    known = set(vocab_tokens)

    while len(vocab_tokens) < vocab_size:
        pair_counts = Counter()
        for word, segs in pieces.items():
            c = words[word]
            for left, right in zip(segs, segs[1:]):
                pair_counts[(left, right)] += c
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = best[0] + best[1][len(CONT):]
        if merged in known:
            # Already present (e.g. via a different merge path); drop the
            # pair from future consideration by applying the merge anyway.
            pass
        else:
            vocab_tokens.append(merged)
            known.add(merged)
        for word, segs in pieces.items():
            pieces[word] = _apply_merge(segs, best, merged)

    vocab = Vocab(vocab_tokens, [0] * len(vocab_tokens), alphabet)
    # Final counts: occurrences of each token when segmenting the corpus.
    totals = [0] * len(vocab_tokens)
    for word, c in words.items():
        for tid in encode_word(word, vocab):
            totals[tid] += c
    vocab.counts = totals
    return vocab


def _apply_merge(segs, pair, merged):
    out = []
    i = 0
    while i < len(segs):
        if i + 1 < len(segs) and segs[i] == pair[0] and segs[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(segs[i])
            i += 1
    return out


def encode_word(word, vocab):
    """Greedy longest-match segmentation of one word; [UNK] if impossible."""
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONT + piece
            if piece in vocab:
                found = vocab.id_of(piece)
                break
            end -= 1
        if found is None:
            return [UNK]
        ids.append(found)
        start = end
    return ids


def encode(text, vocab):
    """Token ids for whitespace-delimited text."""
    ids = []
    for word in text.split():
        ids.extend(encode_word(word, vocab))
    return ids


def decode(ids, vocab, strip_specials=False):
    """Text for a token-id sequence; continuation pieces rejoin their word."""
    words = []
    for idx in ids:
        tok = vocab.token_of(idx)
        if strip_specials and vocab.is_special(idx):
            continue
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)
