"""Corpus ingestion, unified-batch construction, and the synthetic
dictionary-language generator used in place of web-scale corpora.

File formats: monolingual text is one sentence per line with blank lines
as document breaks; parallel text is a TSV of `src<TAB>tgt` per line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lmbridge import subword
from lmbridge.model import UnifiedBatch, mask_for_mlm
from lmbridge.subword import CLS, PAD, PLACEHOLDER, SEP
from lmbridge.wordalign import NULL, to_order


class Corpus:
    """Tokenized monolingual sentences with document boundaries."""

    def __init__(self, sentences, documents=None, n_truncated=0):
        if any(len(s) == 0 for s in sentences):
            raise ValueError("corpus contains an empty sentence")
        self.sentences = sentences
        self.documents = documents if documents is not None else [list(range(len(sentences)))]
        self.n_truncated = n_truncated

    def __len__(self):
        return len(self.sentences)


class ParallelCorpus:
    """Aligned sentence pairs, optionally with gold alignments."""

    def __init__(self, pairs, gold_alignments=None, n_truncated=0, n_dropped=0):
        for s, t in pairs:
            if len(s) == 0 or len(t) == 0:
                raise ValueError("parallel corpus contains an empty side")
        if gold_alignments is not None and len(gold_alignments) != len(pairs):
            raise ValueError("gold alignment count does not match pair count")
        self.pairs = pairs
        self.gold_alignments = gold_alignments
        self.n_truncated = n_truncated
        self.n_dropped = n_dropped

    def __len__(self):
        return len(self.pairs)

    def swapped(self):
        """The reverse direction; gold alignments do not transpose losslessly
        (NULL targets vanish), so they are dropped here."""
        return ParallelCorpus([(t, s) for s, t in self.pairs])


def _read_text(path):
    try:
        raw = open(path, "rb").read()
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ValueError(f"{path}: undecodable byte at offset {e.start}") from None


def load_mono(path, vocab, t_max):
    """Tokenize one-sentence-per-line text; blank line = document break.

    Sentences longer than t_max - 3 (room for specials and the placeholder)
    are truncated and counted.
    """
    cap = t_max - 3
    sentences, documents, current = [], [], []
    n_truncated = 0
    for line in _read_text(path).splitlines():
        if not line.strip():
            if current:
                documents.append(current)
                current = []
            continue
        ids = subword.encode(line, vocab)
        if not ids:
            continue
        if len(ids) > cap:
            ids = ids[:cap]
            n_truncated += 1
        current.append(len(sentences))
        sentences.append(ids)
    if current:
        documents.append(current)
    if not sentences:
        raise ValueError(f"{path}: empty corpus")
    return Corpus(sentences, documents, n_truncated=n_truncated)


def load_parallel(path, vocab, t_max):
    """Tokenize TSV parallel text, truncating over-length sides."""
    cap = t_max - 3
    pairs = []
    n_truncated = 0
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected `src<TAB>tgt`")
        src_text, tgt_text = line.split("\t", 1)
        src = subword.encode(src_text, vocab)
        tgt = subword.encode(tgt_text, vocab)
        if not src or not tgt:
            continue
        if len(src) > cap or len(tgt) > cap:
            src, tgt = src[:cap], tgt[:cap]
            n_truncated += 1
        pairs.append((src, tgt))
    if not pairs:
        raise ValueError(f"{path}: empty parallel corpus")
    return ParallelCorpus(pairs, n_truncated=n_truncated)


# ---------------------------------------------------------------------------
# batch construction

def _pad_to(ids, t_max):
    out = np.full(t_max, PAD, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def make_mlm_batch(sentences, vocab_size, t_max, lang_id, rng, mask_rate=0.15):
    """MLM rows: `[CLS] x [SEP]` masked, successive alignment, W = originals."""
    b = len(sentences)
    s = np.full((b, t_max), PAD, dtype=np.int64)
    w = np.full((b, t_max), PAD, dtype=np.int64)
    c = np.zeros((b, t_max), dtype=np.int64)
    mask_in = np.zeros((b, t_max))
    for r, sent in enumerate(sentences):
        full = [CLS] + list(sent[:t_max - 2]) + [SEP]
        masked, selected, orig = mask_for_mlm(np.array(full), rng, vocab_size, rate=mask_rate)
        s[r, :len(full)] = masked
        w[r, :len(full)] = orig
        c[r, :len(full)] = selected
        mask_in[r, :len(full)] = 1.0
    order = np.tile(np.arange(t_max, dtype=np.int64), (b, 1))
    return UnifiedBatch(
        kind="mlm", s=s, w=w, c=c, order=order,
        lang_in=np.full((b, t_max), lang_id, dtype=np.int64),
        lang_out=np.full(b, lang_id, dtype=np.int64),
        segments=np.zeros((b, t_max), dtype=np.int64),
        mask_in=mask_in,
    )


def make_tlm_batch(pairs, vocab_size, t_max, lang_src, lang_tgt, rng, mask_rate=0.15):
    """TLM rows: `[CLS] x [SEP] y [SEP]` with per-token language and segment
    ids, masked on both sides, successive alignment."""
    b = len(pairs)
    s = np.full((b, t_max), PAD, dtype=np.int64)
    w = np.full((b, t_max), PAD, dtype=np.int64)
    c = np.zeros((b, t_max), dtype=np.int64)
    lang_in = np.full((b, t_max), lang_tgt, dtype=np.int64)
    segments = np.zeros((b, t_max), dtype=np.int64)
    mask_in = np.zeros((b, t_max))
    for r, (src, tgt) in enumerate(pairs):
        budget = t_max - 3
        src = list(src[:budget // 2])
        tgt = list(tgt[:budget - len(src)])
        full = [CLS] + src + [SEP] + tgt + [SEP]
        masked, selected, orig = mask_for_mlm(np.array(full), rng, vocab_size, rate=mask_rate)
        n = len(full)
        s[r, :n] = masked
        w[r, :n] = orig
        c[r, :n] = selected
        lang_in[r, :len(src) + 2] = lang_src
        segments[r, len(src) + 2:n] = 1
        mask_in[r, :n] = 1.0
    order = np.tile(np.arange(t_max, dtype=np.int64), (b, 1))
    return UnifiedBatch(
        kind="tlm", s=s, w=w, c=c, order=order, lang_in=lang_in,
        lang_out=np.full(b, lang_tgt, dtype=np.int64),
        segments=segments, mask_in=mask_in,
    )


def make_cdlm_batch(pairs, alignments, t_max, lang_src, lang_tgt):
    """CdLM rows: S = source + [P]; W = target + [SEP]; O from the alignment
    with NULL (and the stop [SEP]) pointing at the placeholder slot; every
    non-pad output position is predicted."""
    b = len(pairs)
    s = np.full((b, t_max), PAD, dtype=np.int64)
    w = np.full((b, t_max), PAD, dtype=np.int64)
    c = np.zeros((b, t_max), dtype=np.int64)
    order = np.zeros((b, t_max), dtype=np.int64)
    mask_in = np.zeros((b, t_max))
    for r, ((src, tgt), alignment) in enumerate(zip(pairs, alignments)):
        if len(alignment) != len(tgt):
            raise ValueError(
                f"row {r}: alignment length {len(alignment)} != target length {len(tgt)}")
        if len(src) + 1 > t_max or len(tgt) + 1 > t_max:
            raise ValueError(f"row {r}: pair does not fit in t_max={t_max}")
        p_slot = len(src)
        s[r, :len(src)] = src
        s[r, p_slot] = PLACEHOLDER
        w[r, :len(tgt)] = tgt
        w[r, len(tgt)] = SEP
        c[r, :len(tgt) + 1] = 1
        o = to_order(alignment, len(src)) + [p_slot]  # [SEP] reads the placeholder
        order[r, :len(o)] = o
        order[r, len(o):] = p_slot
        mask_in[r, :len(src) + 1] = 1.0
    return UnifiedBatch(
        kind="cdlm", s=s, w=w, c=c, order=order,
        lang_in=np.full((b, t_max), lang_src, dtype=np.int64),
        lang_out=np.full(b, lang_tgt, dtype=np.int64),
        segments=np.zeros((b, t_max), dtype=np.int64),
        mask_in=mask_in,
    )


def make_nsp_batch(corpus, vocab_size, t_max, lang_id, rng, batch, mask_rate=0.15):
    """Sentence-pair rows `[CLS] a [SEP] b [SEP]`: half true next sentences,
    half random, with MLM masking on top; labels arrive in nsp_labels."""
    docs = [d for d in corpus.documents if len(d) >= 2]
    if not docs:
        raise ValueError("NSP needs documents with at least two sentences")
    pairs, labels = [], []
    for _ in range(batch):
        doc = docs[int(rng.integers(0, len(docs)))]
        i = int(rng.integers(0, len(doc) - 1))
        a = corpus.sentences[doc[i]]
        if rng.random() < 0.5:
            b_sent = corpus.sentences[doc[i + 1]]
            labels.append(1)
        else:
            b_sent = corpus.sentences[int(rng.integers(0, len(corpus.sentences)))]
            labels.append(0)
        pairs.append((a, b_sent))

    b = len(pairs)
    s = np.full((b, t_max), PAD, dtype=np.int64)
    w = np.full((b, t_max), PAD, dtype=np.int64)
    c = np.zeros((b, t_max), dtype=np.int64)
    segments = np.zeros((b, t_max), dtype=np.int64)
    mask_in = np.zeros((b, t_max))
    for r, (a, b_sent) in enumerate(pairs):
        budget = t_max - 3
        a = list(a[:budget // 2])
        b_sent = list(b_sent[:budget - len(a)])
        full = [CLS] + a + [SEP] + b_sent + [SEP]
        masked, selected, orig = mask_for_mlm(np.array(full), rng, vocab_size, rate=mask_rate)
        n = len(full)
        s[r, :n] = masked
        w[r, :n] = orig
        c[r, :n] = selected
        segments[r, len(a) + 2:n] = 1
        mask_in[r, :n] = 1.0
    order = np.tile(np.arange(t_max, dtype=np.int64), (b, 1))
    return UnifiedBatch(
        kind="mlm", s=s, w=w, c=c, order=order,
        lang_in=np.full((b, t_max), lang_id, dtype=np.int64),
        lang_out=np.full(b, lang_id, dtype=np.int64),
        segments=segments, mask_in=mask_in,
        nsp_labels=np.array(labels, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# synthetic language pair

_SRC_ALPHABET = "bcdfghjk"
_TGT_ALPHABET = "qrstvwxz"
_PRT_ALPHABET = "lmnp"
_PUNCT = "."


def _word(alphabet, index, length=3):
    base = len(alphabet)
    chars = []
    for _ in range(length):
        chars.append(alphabet[index % base])
        index //= base
    return "".join(chars)


@dataclass
class SynthConfig:
    src_vocab: int = 100
    tgt_vocab: int = 100          # bijective dictionary: must equal src_vocab
    particles: int = 4
    sentences: int = 20000
    len_range: tuple = (4, 9)     # inclusive bounds on content length
    rule: str = "reverse"         # reverse | swap-adjacent | rotate-<k>
    particle_prob: float = 0.1
    punct_prob: float = 0.5
    n_topics: int = 8
    topic_mix: float = 0.8        # share of tokens drawn from the topic block
    seed: int = 0

    def __post_init__(self):
        if self.src_vocab != self.tgt_vocab:
            raise ValueError("the dictionary is bijective: vocab sizes must match")


@dataclass
class SynthPair:
    src_lines: list
    tgt_lines: list
    gold_alignments: list         # word-level; NULL at inserted particles
    dictionary: list              # (src word, tgt word) pairs incl. punctuation
    src_words: list
    tgt_words: list
    particle_words: list

    def write_parallel(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s, t in zip(self.src_lines, self.tgt_lines):
                fh.write(f"{s}\t{t}\n")

    def write_dictionary(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s, t in self.dictionary:
                fh.write(f"{s}\t{t}\n")


def _permutation(rule, n):
    if rule == "reverse":
        return list(range(n - 1, -1, -1))
    if rule == "swap-adjacent":
        perm = list(range(n))
        for i in range(0, n - 1, 2):
            perm[i], perm[i + 1] = perm[i + 1], perm[i]
        return perm
    if rule.startswith("rotate-"):
        k = int(rule.split("-", 1)[1])
        return [(j + k) % n for j in range(n)]
    raise ValueError(f"unknown reorder rule {rule!r}")


def synth_langpair(cfg):
    """Deterministic dictionary-language corpus with gold alignments.

    Target sentences are the dictionary image of the source permuted by the
    reorder rule, with target-only particles inserted (gold alignment NULL
    there) and an optionally shared sentence-final punctuation token.
    Content words are distinct within a sentence.  Topic-blocked sampling
    gives the corpora cluster structure.
    """
    rng = np.random.default_rng(cfg.seed)
    src_words = [_word(_SRC_ALPHABET, i) for i in range(cfg.src_vocab)]
    tgt_words = [_word(_TGT_ALPHABET, i) for i in range(cfg.tgt_vocab)]
    particles = [_word(_PRT_ALPHABET, i, length=2) for i in range(cfg.particles)]
    dictionary = list(zip(src_words, tgt_words)) + [(_PUNCT, _PUNCT)]

    topics = np.array_split(np.arange(cfg.src_vocab), cfg.n_topics)
    lo, hi = cfg.len_range
    src_lines, tgt_lines, golds = [], [], []
    for _ in range(cfg.sentences):
        n = int(rng.integers(lo, hi + 1))
        topic = topics[int(rng.integers(0, len(topics)))]
        n_topic = min(len(topic), int(round(n * cfg.topic_mix)))
        chosen = list(rng.choice(topic, size=n_topic, replace=False))
        rest = np.setdiff1d(np.arange(cfg.src_vocab), chosen)
        chosen += list(rng.choice(rest, size=n - n_topic, replace=False))
        order = rng.permutation(n)
        src_idx = [int(chosen[i]) for i in order]

        perm = _permutation(cfg.rule, n)
        tgt_content = [tgt_words[src_idx[perm[j]]] for j in range(n)]
        gold = list(perm)

        out_tokens, out_gold = [], []
        for j, tok in enumerate(tgt_content):
            if rng.random() < cfg.particle_prob:
                out_tokens.append(particles[int(rng.integers(0, cfg.particles))])
                out_gold.append(NULL)
            out_tokens.append(tok)
            out_gold.append(gold[j])

        src_tokens = [src_words[i] for i in src_idx]
        if rng.random() < cfg.punct_prob:
            src_tokens.append(_PUNCT)
            out_tokens.append(_PUNCT)
            out_gold.append(len(src_tokens) - 1)

        src_lines.append(" ".join(src_tokens))
        tgt_lines.append(" ".join(out_tokens))
        golds.append(out_gold)

    return SynthPair(src_lines=src_lines, tgt_lines=tgt_lines, gold_alignments=golds,
                     dictionary=dictionary, src_words=src_words, tgt_words=tgt_words,
                     particle_words=particles)


def synth_mono(words, n_docs, sents_per_doc, len_range, n_topics, seed,
               topic_mix=0.8, punct_prob=0.5):
    """Document-structured monolingual text over the given word list.

    Sentences in one document share a topic block, which both gives NSP
    its signal and gives skipgram embeddings cluster structure.
    """
    rng = np.random.default_rng(seed)
    topics = np.array_split(np.arange(len(words)), n_topics)
    lo, hi = len_range
    lines = []
    for _ in range(n_docs):
        topic = topics[int(rng.integers(0, n_topics))]
        for _ in range(sents_per_doc):
            n = int(rng.integers(lo, hi + 1))
            toks = []
            for _ in range(n):
                if rng.random() < topic_mix:
                    toks.append(words[int(topic[rng.integers(0, len(topic))])])
                else:
                    toks.append(words[int(rng.integers(0, len(words)))])
            if rng.random() < punct_prob:
                toks.append(_PUNCT)
            lines.append(" ".join(toks))
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def parallel_from_synth(pair, vocab, t_max, limit=None):
    """Tokenize a synthetic pair into a ParallelCorpus, carrying the gold
    word-level alignments through (every surface word must stay a single
    token, which the joint vocabulary budget guarantees)."""
    pairs, golds = [], []
    n = len(pair.src_lines) if limit is None else min(limit, len(pair.src_lines))
    for i in range(n):
        src_words = pair.src_lines[i].split()
        tgt_words = pair.tgt_lines[i].split()
        src = subword.encode(pair.src_lines[i], vocab)
        tgt = subword.encode(pair.tgt_lines[i], vocab)
        if len(src) != len(src_words) or len(tgt) != len(tgt_words):
            raise ValueError(
                "synthetic word split by the tokenizer; raise the vocabulary budget")
        if len(src) + 1 > t_max or len(tgt) + 1 > t_max:
            raise ValueError(f"synthetic pair {i} exceeds t_max={t_max}")
        pairs.append((src, tgt))
        golds.append(list(pair.gold_alignments[i]))
    return ParallelCorpus(pairs, gold_alignments=golds)
