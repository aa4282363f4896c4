# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: skipgram negative-sampling SGD and the IBM-1 E-step.

Arithmetic mirrors _kernels/pure.py operation for operation (compiled with
-ffp-contract=off) so the two backends produce bit-identical results.
"""

from libc.math cimport exp, log

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef unsigned long long LCG_MUL = 25214903917ULL
cdef unsigned long long LCG_ADD = 11ULL


cdef inline double _sigmoid(double f) nogil:
    if f > 30.0:
        return 1.0
    if f < -30.0:
        return 0.0
    return 1.0 / (1.0 + exp(-f))


def skipgram_pass(cnp.int32_t[::1] tokens,
                  cnp.int64_t[::1] offsets,
                  double[:, ::1] vin,
                  double[:, ::1] vout,
                  cnp.int32_t[::1] table,
                  int window,
                  int negatives,
                  double lr0,
                  double lr_floor,
                  long long tokens_done,
                  long long tokens_total,
                  unsigned long long rng_state):
    """See _kernels.pure.skipgram_pass; identical contract and results."""
    cdef int d = vin.shape[1]
    cdef Py_ssize_t table_size = table.shape[0]
    cdef Py_ssize_t n_sents = offsets.shape[0] - 1
    cdef unsigned long long state = rng_state
    cdef cnp.ndarray[double, ndim=1] neu1e_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] neu1e = neu1e_arr

    cdef Py_ssize_t s, start, end, pos, c
    cdef int sent_len, a, b, k, neg, center, ctx, target
    cdef double alpha, frac, f, g, label

    for s in range(n_sents):
        start = offsets[s]
        end = offsets[s + 1]
        sent_len = <int> (end - start)
        for pos in range(sent_len):
            frac = (<double> tokens_done) / (<double> tokens_total)
            alpha = lr0 * (1.0 - frac)
            if alpha < lr0 * lr_floor:
                alpha = lr0 * lr_floor
            tokens_done += 1

            center = tokens[start + pos]
            state = state * LCG_MUL + LCG_ADD
            b = <int> (state % <unsigned long long> window)
            for a in range(b, 2 * window + 1 - b):
                if a == window:
                    continue
                c = pos - window + a
                if c < 0 or c >= sent_len:
                    continue
                ctx = tokens[start + c]
                for k in range(d):
                    neu1e[k] = 0.0
                for neg in range(negatives + 1):
                    if neg == 0:
                        target = ctx
                        label = 1.0
                    else:
                        state = state * LCG_MUL + LCG_ADD
                        target = table[(state >> 16) % <unsigned long long> table_size]
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


def ibm1_estep(cnp.int64_t[::1] slots,
               cnp.int64_t[::1] pair_offsets,
               cnp.int32_t[::1] src_lens,
               cnp.int32_t[::1] tgt_lens,
               double[::1] t_probs,
               double[::1] counts):
    """See _kernels.pure.ibm1_estep; identical contract and results."""
    cdef Py_ssize_t n_pairs = src_lens.shape[0]
    cdef Py_ssize_t p, base, row
    cdef int s_len, t_len, i, j
    cdef double ll = 0.0
    cdef double denom, log_slen
    cdef cnp.int64_t idx

    for p in range(n_pairs):
        base = pair_offsets[p]
        s_len = src_lens[p] + 1
        t_len = tgt_lens[p]
        log_slen = log(<double> s_len)
        for j in range(t_len):
            row = base + j * s_len
            denom = 0.0
            for i in range(s_len):
                denom += t_probs[slots[row + i]]
            ll += log(denom) - log_slen
            for i in range(s_len):
                idx = slots[row + i]
                counts[idx] += t_probs[idx] / denom
    return ll
