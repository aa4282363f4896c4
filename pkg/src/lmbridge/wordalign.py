"""Unsupervised word alignment: IBM Model 1 EM in both directions,
intersect / grow-diag symmetrization, conversion of per-pair alignments
to the reorder vector used by the pivot layer, and Pharaoh-format I/O.

Alignment runs directly on subword token ids.  NULL (no source token) is
represented as -1 inside AlignmentSet entries and maps to the appended
placeholder slot in the reorder vector.
"""

from __future__ import annotations

import math

import numpy as np

from lmbridge import _kernels

NULL = -1


class TranslationTable:
    """Sparse t(tgt | src) with a NULL source row; per-source rows sum to 1."""

    def __init__(self, probs):
        # probs: dict src_id -> dict tgt_id -> probability; NULL key included.
        self.probs = probs

    def prob(self, src, tgt):
        return self.probs.get(src, {}).get(tgt, 0.0)

    def row(self, src):
        return self.probs.get(src, {})

    def check_normalized(self, tol=1e-9):
        for src, row in self.probs.items():
            total = sum(row.values())
            if abs(total - 1.0) > tol:
                raise AssertionError(f"row for source {src} sums to {total}")


def _prepare_estep(pairs):
    """Flatten (src ids, tgt ids) pairs into slot arrays for the kernel.

    Every co-occurring (src, tgt) pair (with NULL prepended to every source
    sentence) gets one slot in a flat probability/count vector.
    """
    slot_of = {}
    src_of_slot = []

    def slot(s, t):
        key = (s, t)
        idx = slot_of.get(key)
        if idx is None:
            idx = len(slot_of)
            slot_of[key] = idx
            src_of_slot.append(s)
        return idx

    offsets = np.zeros(len(pairs), dtype=np.int64)
    src_lens = np.zeros(len(pairs), dtype=np.int32)
    tgt_lens = np.zeros(len(pairs), dtype=np.int32)
    chunks = []
    total = 0
    for p, (src, tgt) in enumerate(pairs):
        offsets[p] = total
        src_lens[p] = len(src)
        tgt_lens[p] = len(tgt)
        cells = np.empty((len(tgt), len(src) + 1), dtype=np.int64)
        for j, t in enumerate(tgt):
            cells[j, 0] = slot(NULL, t)
            for i, s in enumerate(src):
                cells[j, i + 1] = slot(s, t)
        chunks.append(cells.reshape(-1))
        total += cells.size
    slots = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return slots, offsets, src_lens, tgt_lens, slot_of, np.array(src_of_slot, dtype=np.int64)


def train_ibm1(pairs, iterations=10, return_loglik=False):
    """IBM Model 1 EM over tokenized sentence pairs.

    `pairs` is a sequence of (src ids, tgt ids).  Initialization is uniform
    over the target types observed with each source token, so 0 iterations
    returns the uniform table.  Deterministic; corpus log-likelihood is
    non-decreasing across iterations.
    """
    pairs = [(list(s), list(t)) for s, t in pairs]
    if not pairs:
        raise ValueError("empty parallel corpus")
    for s, t in pairs:
        if not s or not t:
            raise ValueError("empty sentence in parallel corpus")

    slots, offsets, src_lens, tgt_lens, slot_of, src_of_slot = _prepare_estep(pairs)
    n_slots = len(slot_of)

    # Uniform over each source token's observed target types.
    src_index = {}
    for s in src_of_slot:
        src_index.setdefault(int(s), len(src_index))
    src_compact = np.array([src_index[int(s)] for s in src_of_slot], dtype=np.int64)
    fanout = np.bincount(src_compact, minlength=len(src_index)).astype(np.float64)
    t_probs = 1.0 / fanout[src_compact]

    logliks = []
    for _ in range(iterations):
        counts = np.zeros(n_slots)
        ll = _kernels.ibm1_estep(slots, offsets, src_lens, tgt_lens, t_probs, counts)
        logliks.append(float(ll))
        totals = np.bincount(src_compact, weights=counts, minlength=len(src_index))
        t_probs = counts / totals[src_compact]

    table = {}
    for (s, t), idx in slot_of.items():
        table.setdefault(s, {})[t] = float(t_probs[idx])
    result = TranslationTable(table)
    return (result, logliks) if return_loglik else result


def _viterbi_links(src, tgt, table):
    """(i, j) links: each target position j claims its best source index
    under t(tgt_j | src_i), or NULL (no link emitted).

    Ties prefer any token over NULL, then the diagonal (smaller
    |i/T - j/T'|), then the smaller source index.
    """
    links = set()
    for j, t in enumerate(tgt):
        best_i = NULL
        best_p = table.prob(NULL, t)
        best_d = math.inf
        for i, s in enumerate(src):
            p = table.prob(s, t)
            if p < best_p:
                continue
            d = abs(i / len(src) - j / len(tgt))
            if p > best_p or best_i == NULL or d < best_d - 1e-12:
                best_i, best_p, best_d = i, p, d
        if best_i != NULL:
            links.add((best_i, j))
    return links


def symmetrize(fwd_links, rev_links, src_len, tgt_len, mode="grow-diag"):
    """Combine directional link sets into one set of (i, j) links."""
    if mode == "intersect":
        return fwd_links & rev_links
    if mode != "grow-diag":
        raise ValueError(f"unknown symmetrization mode {mode!r}")
    alignment = set(fwd_links & rev_links)
    union = fwd_links | rev_links
    src_done = {i for i, _ in alignment}
    tgt_done = {j for _, j in alignment}
    neighbors = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
    grew = True
    while grew:
        grew = False
        for i, j in sorted(alignment):
            for di, dj in neighbors:
                ni, nj = i + di, j + dj
                if not (0 <= ni < src_len and 0 <= nj < tgt_len):
                    continue
                if (ni, nj) in union and (ni not in src_done or nj not in tgt_done):
                    alignment.add((ni, nj))
                    src_done.add(ni)
                    tgt_done.add(nj)
                    grew = True
    return alignment


def align_pair(src, tgt, fwd, rev, mode="grow-diag"):
    """AlignmentSet for one pair: source index or NULL per target position.

    fwd is t(tgt|src), rev is t(src|tgt); directional Viterbi alignments are
    symmetrized by `mode`, remaining uncovered target positions become NULL,
    and multiple links to one target position resolve toward the diagonal.
    """
    src, tgt = list(src), list(tgt)
    if not src or not tgt:
        raise ValueError("empty sentence in align_pair")
    fwd_links = _viterbi_links(src, tgt, fwd)
    # Reverse direction: each source position claims its best target.
    rev_links = {(i, j) for (j, i) in _viterbi_links(tgt, src, rev)}
    links = symmetrize(fwd_links, rev_links, len(src), len(tgt), mode=mode)

    alignment = []
    for j in range(len(tgt)):
        cands = [i for (i, jj) in links if jj == j]
        if not cands:
            alignment.append(NULL)
            continue
        cands.sort(key=lambda i: (abs(i / len(src) - j / len(tgt)), i))
        alignment.append(cands[0])
    return alignment


def to_order(alignment, src_len):
    """Reorder vector: O[j] = aligned source index, NULL -> the [P] slot
    at index src_len (the placeholder appended after the last source token)."""
    order = []
    for j, i in enumerate(alignment):
        if i == NULL:
            order.append(src_len)
        elif 0 <= i < src_len:
            order.append(i)
        else:
            raise ValueError(f"alignment index {i} out of range for source length {src_len}")
    return order


def parse_pharaoh(line, lineno=0):
    """Parse one 'i-j i-j ...' line into a set of (i, j) links."""
    links = set()
    for tok in line.split():
        parts = tok.split("-")
        if len(parts) != 2:
            raise ValueError(f"malformed alignment token {tok!r} on line {lineno}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"malformed alignment token {tok!r} on line {lineno}") from None
        if i < 0 or j < 0:
            raise ValueError(f"negative index in token {tok!r} on line {lineno}")
        links.add((i, j))
    return links


def emit_pharaoh(links):
    """Render links as a sorted 'i-j' line; NULL targets are omitted."""
    return " ".join(f"{i}-{j}" for i, j in sorted(links))


def alignment_to_links(alignment):
    return {(i, j) for j, i in enumerate(alignment) if i != NULL}


def links_to_alignment(links, tgt_len, src_len):
    """Inverse of alignment_to_links against a known target length."""
    alignment = [NULL] * tgt_len
    for i, j in sorted(links):
        if j >= tgt_len or i >= src_len:
            raise ValueError(f"link {i}-{j} outside sentence bounds ({src_len}, {tgt_len})")
        if alignment[j] == NULL:
            alignment[j] = i
    return alignment


def save_pharaoh(alignments, path):
    with open(path, "w", encoding="utf-8") as fh:
        for alignment in alignments:
            fh.write(emit_pharaoh(alignment_to_links(alignment)) + "\n")


def load_pharaoh(path, tgt_lens, src_lens):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            links = parse_pharaoh(line.strip(), lineno=lineno + 1)
            out.append(links_to_alignment(links, tgt_lens[lineno], src_lens[lineno]))
    return out
