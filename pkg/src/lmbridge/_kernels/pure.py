"""Pure-Python reference kernels.

These are the fallback twins of the Cython kernels in _ckernels.pyx.  Every
floating-point operation is written in the same order as the compiled code
(scalar loops, no numpy vector arithmetic) so that both backends produce
bit-identical results.  Correspondingly they are slow; see
benchmarks/bench_kernels.py for the measured gap.
"""

import math

# word2vec's 64-bit LCG; wraps modulo 2^64.
_LCG_MUL = 25214903917
_LCG_ADD = 11
_LCG_MASK = (1 << 64) - 1


def _sigmoid(f):
    # Clipped exactly as in the compiled kernel so both stay identical.
    if f > 30.0:
        return 1.0
    if f < -30.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(-f))


def skipgram_pass(tokens, offsets, vin, vout, table, window, negatives,
                  lr0, lr_floor, tokens_done, tokens_total, rng_state):
    """One pass of skipgram negative-sampling SGD over the corpus.

    tokens: int32[n] flat token ids, offsets: int64[s+1] sentence bounds.
    vin/vout: float64[V, d] parameter matrices, updated in place.
    table: int32[m] unigram^0.75 sampling table.
    Returns (tokens_done, rng_state) so callers can chain epochs.
    """
    d = vin.shape[1]
    table_size = len(table)
    n_sents = len(offsets) - 1
    state = rng_state & _LCG_MASK
    neu1e = [0.0] * d

    for s in range(n_sents):
        start = int(offsets[s])
        end = int(offsets[s + 1])
        sent_len = end - start
        for pos in range(sent_len):
            frac = tokens_done / tokens_total
            alpha = lr0 * (1.0 - frac)
            if alpha < lr0 * lr_floor:
                alpha = lr0 * lr_floor
            tokens_done += 1

            center = int(tokens[start + pos])
            state = (state * _LCG_MUL + _LCG_ADD) & _LCG_MASK
            b = state % window
            for a in range(b, 2 * window + 1 - b):
                if a == window:
                    continue
                c = pos - window + a
                if c < 0 or c >= sent_len:
                    continue
                ctx = int(tokens[start + c])
                for k in range(d):
                    neu1e[k] = 0.0
                for neg in range(negatives + 1):
                    if neg == 0:
                        target = ctx
                        label = 1.0
                    else:
                        state = (state * _LCG_MUL + _LCG_ADD) & _LCG_MASK
                        target = int(table[(state >> 16) % table_size])
                        if target == ctx:
                            continue
                        label = 0.0
                    f = 0.0
                    for k in range(d):
                        f += vin[center, k] * vout[target, k]
                    g = (label - _sigmoid(f)) * alpha
                    for k in range(d):
                        neu1e[k] += g * vout[target, k]
                    for k in range(d):
                        vout[target, k] += g * vin[center, k]
                for k in range(d):
                    vin[center, k] += neu1e[k]

    return tokens_done, state


def ibm1_estep(slots, pair_offsets, src_lens, tgt_lens, t_probs, counts):
    """IBM Model 1 expectation step over all sentence pairs.

    slots: int64 flat array mapping each (target position j, source position
    i incl. NULL at i=0) cell of each pair to its translation-table slot;
    layout per pair is j-major with stride src_len+1.  Accumulates expected
    counts into `counts` and returns the corpus log-likelihood.
    """
    n_pairs = len(src_lens)
    ll = 0.0
    for p in range(n_pairs):
        base = int(pair_offsets[p])
        s_len = int(src_lens[p]) + 1  # NULL included
        t_len = int(tgt_lens[p])
        log_slen = math.log(s_len)
        for j in range(t_len):
            row = base + j * s_len
            denom = 0.0
            for i in range(s_len):
                denom += t_probs[slots[row + i]]
            ll += math.log(denom) - log_slen
            for i in range(s_len):
                idx = slots[row + i]
                counts[idx] += t_probs[idx] / denom
    return ll
