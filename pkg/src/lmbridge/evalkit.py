"""Evaluation: bits-per-word under a frozen mask, one-pass translation
generation with repetition collapse, and corpus-level cumulative BLEU.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

import lmbridge.tensor as T
from lmbridge.data import make_cdlm_batch
from lmbridge.model import UnifiedBatch, mask_for_mlm
from lmbridge.subword import CLS, PAD, SEP, SPECIALS

BLEU_EPS = 1e-9  # substituted for zero clipped n-gram precisions


@dataclass
class EvalReport:
    metric: str
    value: float
    corpus_id: str
    fingerprint: str
    seeds: tuple

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite {self.metric} value")


def config_fingerprint(cfg):
    """Stable hash of a configuration mapping."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _masked_rows(corpus, vocab_size, t_max, mask_seed, mask_rate):
    """Mask every sentence once with a corpus-order stream, so the masked
    set is a function of (corpus, seed) only -- identical across the models
    being compared and across batch sizes."""
    rng = np.random.default_rng(mask_seed)
    rows = []
    for sent in corpus.sentences:
        full = np.array([CLS] + list(sent[:t_max - 2]) + [SEP])
        s, c, w = mask_for_mlm(full, rng, vocab_size, rate=mask_rate)
        if c.sum() > 0:
            rows.append((s, c, w))
    return rows


def bpw(stack, corpus, mask_seed, lang_id=1, batch_size=64, mask_rate=0.15):
    """Subword bits-per-word: mean -log2 p(gold) over masked positions,
    eval mode, fixed mask seed.  Batch size and order do not affect the
    result beyond float rounding (summation is fsum in corpus order)."""
    if len(corpus.sentences) == 0:
        raise ValueError("empty evaluation corpus")
    rows = _masked_rows(corpus, stack.cfg.vocab_size, stack.cfg.t_max,
                        mask_seed, mask_rate)
    t_max = stack.cfg.t_max
    bits = []
    with T.no_grad():
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            b = len(chunk)
            s = np.full((b, t_max), PAD, dtype=np.int64)
            w = np.full((b, t_max), PAD, dtype=np.int64)
            c = np.zeros((b, t_max), dtype=np.int64)
            mask_in = np.zeros((b, t_max))
            for r, (si, ci, wi) in enumerate(chunk):
                n = len(si)
                s[r, :n] = si
                c[r, :n] = ci
                w[r, :n] = wi
                mask_in[r, :n] = 1.0
            batch = UnifiedBatch(
                kind="mlm", s=s, w=w, c=c,
                order=np.tile(np.arange(t_max, dtype=np.int64), (b, 1)),
                lang_in=np.full((b, t_max), lang_id, dtype=np.int64),
                lang_out=np.full(b, lang_id, dtype=np.int64),
                segments=np.zeros((b, t_max), dtype=np.int64),
                mask_in=mask_in)
            fwd = stack.unified_forward(batch, training=False)
            # per-position nats at predicted positions, in corpus order
            nats = fwd.losses.data
            for r in range(b):
                for pos in np.nonzero(c[r])[0]:
                    bits.append(nats[r, pos] / math.log(2.0))
    if not bits:
        raise ValueError("evaluation mask selected no positions")
    return math.fsum(bits) / len(bits)


def collapse_repeats(ids):
    """Collapse runs of the same token to one occurrence (idempotent)."""
    out = []
    for t in ids:
        if not out or out[-1] != t:
            out.append(t)
    return out


def postprocess_generation(ids):
    """Repetition collapse, stop at the first [SEP], drop special tokens."""
    out = []
    for t in collapse_repeats(ids):
        if t == SEP:
            break
        if t >= len(SPECIALS):
            out.append(t)
    return out


def generate_cdlm(stack, src_ids, lang_src, lang_tgt, raw=False):
    """Translate one source sequence in a single non-autoregressive pass.

    Inference has no alignment, so the successive alignment is used (the
    same one MLM training uses); per-position argmax, then repetition
    collapse and the [SEP] stop rule.
    """
    src_ids = list(src_ids)
    t_max = stack.cfg.t_max
    if len(src_ids) + 1 > t_max:
        src_ids = src_ids[:t_max - 1]
    n = len(src_ids) + 1  # output slots: one per source token plus the placeholder
    # W is a dummy (the source itself); only the logits are used.  The
    # identity alignment plus the appended stop slot IS the successive
    # alignment over all n positions.
    batch = make_cdlm_batch([(src_ids, src_ids)],
                            [list(range(len(src_ids)))], t_max,
                            lang_src, lang_tgt)
    with T.no_grad():
        fwd = stack.unified_forward(batch, training=False)
    pred = fwd.logits.data[0, :n].argmax(axis=-1).tolist()
    return pred if raw else postprocess_generation(pred)


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _units(text, unit):
    if isinstance(text, (list, tuple)):
        toks = list(text)
    elif unit == "word":
        toks = text.split()
    elif unit == "char":
        toks = [ch for ch in text if not ch.isspace()]
    else:
        raise ValueError(f"unknown BLEU unit {unit!r}")
    return toks


def bleu(hyps, refs, max_n=4, unit="word"):
    """Corpus-level cumulative BLEU-1..max_n, as percentages.

    Uniform 1/n weights with the standard brevity penalty; clipped n-gram
    precisions that come out zero are replaced by 1e-9 before the log.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h = _units(hyp, unit)
        r = _units(ref, unit)
        if not r:
            raise ValueError("empty reference sentence")
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngram_counts(h, n)
            rc = _ngram_counts(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    precisions = [
        (matches[n] / totals[n]) if totals[n] > 0 and matches[n] > 0 else BLEU_EPS
        for n in range(max_n)
    ]
    scores = []
    for k in range(1, max_n + 1):
        mean_log = sum(math.log(p) for p in precisions[:k]) / k
        scores.append(100.0 * bp * math.exp(mean_log))
    return scores


def token_accuracy(hyps, refs):
    """Positionwise accuracy over aligned sequences (truncated to the
    shorter of the two); the word-for-word translation metric."""
    ok = total = 0
    for h, r in zip(hyps, refs):
        for a, b in zip(h, r):
            ok += (a == b)
            total += 1
        total += abs(len(h) - len(r))
    return ok / max(total, 1)


def report_rows_csv(rows):
    """Sweep report: `arm,checkpoint,metric,value,seed` lines."""
    lines = ["arm,checkpoint,metric,value,seed"]
    for r in rows:
        lines.append(f"{r['arm']},{r['checkpoint']},{r['metric']},"
                     f"{repr(r['value'])},{r['seed']}")
    return "\n".join(lines) + "\n"
