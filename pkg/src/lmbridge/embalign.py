"""Align a fresh static embedding space V onto a donor raw-embedding space U.

Stages: adversarial training of a linear map W (a discriminator learns to
tell mapped-V rows from U rows while W learns to fool it), orthogonal
Procrustes refinement over a mined or supplied dictionary, and CSLS
retrieval for translation and for the unsupervised model-selection
criterion.  U is never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import lmbridge.tensor as T
from lmbridge.optim import ParamStore, adam_step
from lmbridge.skipgram import EmbeddingSpace, cosine_matrix, train_skipgram


class LinearMap:
    """The d x d map W applied to row vectors as v -> W v."""

    def __init__(self, w):
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise ValueError(f"mapping must be square, got {self.w.shape}")

    @property
    def dim(self):
        return self.w.shape[0]

    def apply(self, vectors):
        return np.asarray(vectors) @ self.w.T

    def orthogonality_gap(self):
        d = self.dim
        return float(np.linalg.norm(self.w.T @ self.w - np.eye(d)))

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))


class Discriminator:
    """MLP d -> h -> h -> 1 with Leaky-ReLU hidden layers and sigmoid output.

    Input dropout regularizes training; with a few hundred rows per space
    the discriminator memorizes both clouds otherwise and stops carrying a
    useful signal to the mapping.
    """

    def __init__(self, d, hidden=None, seed=0, input_dropout=0.1):
        h = hidden if hidden is not None else 4 * d
        self.input_dropout = input_dropout
        self.rng = np.random.default_rng(seed)
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        for name, (fan_in, fan_out) in (("w1", (d, h)), ("w2", (h, h)), ("w3", (h, 1))):
            bound = 1.0 / np.sqrt(fan_in)
            self.store.add(name, T.tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            self.store.add(name.replace("w", "b"), T.tensor(np.zeros(fan_out)))

    def logits(self, x, training=False):
        """Pre-sigmoid score that the input row comes from the U space."""
        s = self.store
        x = T.dropout(x, self.input_dropout, self.rng, training)
        h1 = T.leaky_relu(T.add(T.matmul(x, s["w1"]), s["b1"]))
        h2 = T.leaky_relu(T.add(T.matmul(h1, s["w2"]), s["b2"]))
        return T.add(T.matmul(h2, s["w3"]), s["b3"])

    def prob_u(self, x):
        z = self.logits(x).data[:, 0]
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class AlignConfig:
    steps: int = 10000
    batch: int = 128
    lr_d: float = 1e-4
    lr_w: float = 0.1
    smoothing: float = 0.1
    hidden: int | None = None
    ortho_beta: float = 0.01
    csls_k: int = 10
    lr_decay: float = 0.98   # applied to lr_w at every evaluation point
    lr_shrink: float = 0.5   # extra shrink when the criterion drops
    eval_every: int = 0      # 0 -> steps // 50
    seed: int = 0


def _binary_ce(z, labels, smoothing):
    """Mean two-class cross entropy on logits z (B,1); label 1 means 'from U'.

    Implemented as a softmax over [0, z] so it reuses the integer-target
    cross-entropy primitive; with smoothing s the target mass is 1-s / s.
    """
    two = T.concat([T.tensor(np.zeros_like(z.data)), z], axis=1)
    y = np.asarray(labels, dtype=np.int64)
    ce_true = T.cross_entropy(two, y)
    loss = T.masked_mean(ce_true, np.ones_like(y, dtype=np.float64))
    if smoothing > 0.0:
        ce_flip = T.cross_entropy(two, 1 - y)
        loss = T.add(T.mul(loss, T.tensor(1.0 - smoothing)),
                     T.mul(T.masked_mean(ce_flip, np.ones_like(y, dtype=np.float64)),
                           T.tensor(smoothing)))
    return loss


def discrimination_loss(disc, mapped_v, u_rows, smoothing, flip=False, training=False):
    """The two-sided discriminator objective on one batch.

    With flip=False this is the discriminator's loss (predict the true
    source space); with flip=True it is the mapping's loss (predict the
    wrong source).  At smoothing 0 the two are label-flips of each other.
    """
    zv = disc.logits(mapped_v, training=training)
    zu = disc.logits(u_rows, training=training)
    v_label, u_label = (1, 0) if flip else (0, 1)
    lv = _binary_ce(zv, np.full(zv.shape[0], v_label), smoothing)
    lu = _binary_ce(zu, np.full(zu.shape[0], u_label), smoothing)
    return T.add(lv, lu)


def csls_translate(wv, u, k=10):
    """Best U row for every mapped-V row under CSLS, with scores.

    CSLS(i, j) = 2 cos(i, j) - mean cos of i to its k nearest U rows
                               - mean cos of j to its k nearest WV rows.
    """
    wv = np.asarray(wv)
    u = np.asarray(u)
    if k < 1 or k >= min(wv.shape[0], u.shape[0]):
        raise ValueError(f"k={k} must satisfy 1 <= k < min({wv.shape[0]}, {u.shape[0]})")
    cos = cosine_matrix(wv, u)
    r_src = np.sort(cos, axis=1)[:, -k:].mean(axis=1)
    r_tgt = np.sort(cos, axis=0)[-k:, :].mean(axis=0)
    scores = 2.0 * cos - r_src[:, None] - r_tgt[None, :]
    best = scores.argmax(axis=1)
    return best, scores[np.arange(len(best)), best]


def mine_dictionary(wv, u, k=10):
    """Mutual CSLS nearest neighbours as (v_idx, u_idx) pairs."""
    fwd, fwd_scores = csls_translate(wv, u, k)
    rev, _ = csls_translate(u, wv, k)
    pairs = [(i, int(j)) for i, j in enumerate(fwd) if int(rev[int(j)]) == i]
    scores = [float(fwd_scores[i]) for i, _ in pairs]
    return pairs, scores


def adversarial_align(u_space, v_space, cfg=None):
    """Learn W minimizing the mapping loss against a jointly-trained
    discriminator; returns (LinearMap, per-evaluation training log).

    Rows of both spaces are unit-normalized internally; the best W over
    the run is chosen by the unsupervised mean-CSLS criterion over mined
    mutual nearest neighbours.
    """
    cfg = cfg or AlignConfig()
    if u_space.dim != v_space.dim:
        raise ValueError(f"dimension mismatch: U has d={u_space.dim}, V has d={v_space.dim}")
    d = u_space.dim
    u = u_space.normalize().vectors
    v = v_space.normalize().vectors
    rng = np.random.default_rng(cfg.seed)
    half = max(1, cfg.batch // 2)
    eval_every = cfg.eval_every or max(1, cfg.steps // 50)

    w = T.tensor(np.eye(d), requires_grad=True)
    disc = Discriminator(d, hidden=cfg.hidden, seed=cfg.seed + 1)

    best = {"criterion": -np.inf, "w": np.eye(d)}
    log = []
    lr_t = cfg.lr_w

    def sample(mat):
        ids = rng.integers(0, mat.shape[0], size=half)
        return mat[ids]

    for step in range(cfg.steps):
        # Discriminator update (mapped inputs are constants here).
        loss_d = discrimination_loss(disc, T.tensor(sample(v) @ w.data.T), T.tensor(sample(u)),
                                     cfg.smoothing, flip=False, training=True)
        loss_d.backward()
        adam_step(disc.store, lr=cfg.lr_d)

        # Mapping update with flipped labels; only W moves.
        mapped = T.tensor(sample(v)) @ T.transpose(w)
        loss_w = discrimination_loss(disc, mapped, T.tensor(sample(u)),
                                     cfg.smoothing, flip=True, training=True)
        loss_w.backward()
        w.data -= lr_t * w.grad
        w.grad = None
        disc.store.zero_grads()
        # Keep W near-orthogonal: W <- (1+b) W - b (W W^T) W.
        if cfg.ortho_beta > 0.0:
            w.data = (1.0 + cfg.ortho_beta) * w.data \
                - cfg.ortho_beta * (w.data @ w.data.T) @ w.data

        if (step + 1) % eval_every == 0 or step == cfg.steps - 1:
            entry = _evaluate(disc, u, v, w.data, cfg, step + 1, rng)
            entry["lr_w"] = lr_t
            log.append(entry)
            if entry["criterion"] > best["criterion"]:
                best = {"criterion": entry["criterion"], "w": w.data.copy()}
            elif np.isfinite(entry["criterion"]):
                lr_t *= cfg.lr_shrink
            lr_t *= cfg.lr_decay

    return LinearMap(best["w"]), log


def _evaluate(disc, u, v, w, cfg, step, rng):
    n_eval = min(512, len(u), len(v))
    v_ids = rng.integers(0, len(v), size=n_eval)
    u_ids = rng.integers(0, len(u), size=n_eval)
    with T.no_grad():
        pv = disc.prob_u(T.tensor(v[v_ids] @ w.T))
        pu = disc.prob_u(T.tensor(u[u_ids]))
    acc = 0.5 * ((pv < 0.5).mean() + (pu >= 0.5).mean())
    mapped = v @ w.T
    pairs, scores = mine_dictionary(mapped, u, k=cfg.csls_k)
    criterion = float(np.mean(scores)) if scores else -np.inf
    return {"step": step, "disc_accuracy": float(acc),
            "criterion": criterion, "mined_pairs": len(pairs)}


def procrustes_refine(mapping, u_space, v_space, dictionary=None, rounds=1, csls_k=10):
    """Iterative closed-form refinement of the mapping.

    Each round solves the orthogonal Procrustes problem over the current
    dictionary (SVD of U_d^T V_d) and then re-mines the dictionary by
    mutual CSLS under the new map.  An empty dictionary is mined first.
    """
    u = u_space.normalize().vectors
    v = v_space.normalize().vectors
    w = mapping.w.copy()
    pairs = list(dictionary) if dictionary else None
    for _ in range(rounds):
        if not pairs:
            pairs, _ = mine_dictionary(v @ w.T, u, k=csls_k)
            if not pairs:
                raise ValueError("refinement dictionary is empty and none could be mined")
        v_ids = np.array([p[0] for p in pairs])
        u_ids = np.array([p[1] for p in pairs])
        m = u[u_ids].T @ v[v_ids]
        if np.linalg.matrix_rank(m) < m.shape[0]:
            raise ValueError(
                f"rank-deficient cross-covariance from dictionary of {len(pairs)} pairs")
        a, _, bt = np.linalg.svd(m)
        w = a @ bt
        pairs, _ = mine_dictionary(v @ w.T, u, k=csls_k)
    return LinearMap(w)


@dataclass
class SpaceDiagnostics:
    probe: int
    histogram: np.ndarray
    bin_edges: np.ndarray
    neighbor_ids: list = field(default_factory=list)
    coords: np.ndarray = None

    def rows(self):
        """CSV rows: histogram buckets then 2-D neighbour coordinates."""
        out = [("kind", "a", "b", "c")]
        for lo, hi, n in zip(self.bin_edges[:-1], self.bin_edges[1:], self.histogram):
            out.append(("hist", repr(float(lo)), repr(float(hi)), str(int(n))))
        for tid, (x, y) in zip(self.neighbor_ids, self.coords):
            out.append(("pca", str(tid), repr(float(x)), repr(float(y))))
        return out


def pca_2d(vectors):
    """Top-2 principal-component coordinates of the rows (eigendecomposition)."""
    x = np.asarray(vectors, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, [-1, -2]]
    # Deterministic sign: largest-magnitude loading is positive.
    for c in range(2):
        j = np.argmax(np.abs(comps[:, c]))
        if comps[j, c] < 0:
            comps[:, c] = -comps[:, c]
    return centered @ comps


def space_diagnostics(space, probe, bins=100, top=50):
    """Cosine histogram of one token against the space plus a 2-D PCA
    projection of its nearest neighbours (probe included)."""
    n = len(space)
    if not 0 <= probe < n:
        raise IndexError(f"probe id {probe} out of range for space of {n}")
    sims = cosine_matrix(space.vectors[probe:probe + 1], space.vectors)[0]
    others = np.delete(sims, probe)
    hist, edges = np.histogram(others, bins=bins, range=(-1.0, 1.0))
    order = np.argsort(-others, kind="stable")
    all_ids = np.delete(np.arange(n), probe)
    neighbor_ids = [probe] + [int(i) for i in all_ids[order[:top]]]
    coords = pca_2d(space.vectors[neighbor_ids])
    return SpaceDiagnostics(probe=probe, histogram=hist, bin_edges=edges,
                            neighbor_ids=neighbor_ids, coords=coords)


def simulated_donor_space(sentences, n_vocab, d, seed, rotation_seed=None, **skipgram_kwargs):
    """Stand-in for a donor model's raw embeddings when none exists: an
    independently seeded skipgram run viewed through a hidden rotation."""
    space = train_skipgram(sentences, n_vocab, d, seed=seed, **skipgram_kwargs)
    rot_seed = rotation_seed if rotation_seed is not None else seed + 7919
    r = random_rotation(d, rot_seed)
    return EmbeddingSpace(space.vectors @ r.T, vocab=space.vocab)


def random_rotation(d, seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))
