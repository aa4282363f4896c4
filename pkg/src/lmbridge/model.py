"""Transformer encoder split around a pivot layer, with the unified
masked / translation / cross-lingual LM forward pass.

The stack is: four-way input embedding (word + segment + position +
language), N/2 lower layers, one pivot layer that consumes
alignment-reordered hidden states plus re-injected position and
target-language embeddings, N/2 upper layers, and a tied LM head.  One
loss form covers MLM, TLM and CdLM batches: predict the output sequence
W at positions C given input S and the alignment-derived order O.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

import lmbridge.tensor as T
from lmbridge.optim import ParamStore
from lmbridge.subword import PAD, SPECIALS
from lmbridge.tensor import Tensor, truncated_normal, orthogonal_init

MASK_BIAS = -1e9
GROUPS = ("embeddings", "lower", "trilayer", "upper", "heads")


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    t_max: int
    vocab_size: int
    n_segments: int = 2
    n_languages: int = 2
    dropout: float = 0.1
    tie_lm_head: bool = True

    def __post_init__(self):
        if self.n_layers % 2 != 0 or self.n_layers < 2:
            raise ValueError(f"n_layers must be even and >= 2, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")
        if self.t_max < 8:
            raise ValueError(f"t_max must be >= 8, got {self.t_max}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class UnifiedBatch:
    """One padded training batch in the unified LM view.

    kind is "mlm", "tlm", "cdlm" or "mixed"; rows of a mixed batch keep
    their own kind in row_kinds.  All id arrays are (B, t_max).
    """

    kind: str
    s: np.ndarray            # input token ids
    w: np.ndarray            # output token ids ([PAD] outside the target)
    c: np.ndarray            # 1 where a prediction is scored
    order: np.ndarray        # reorder vector; pad region points at a valid row
    lang_in: np.ndarray      # per-token language ids
    lang_out: np.ndarray     # (B,) language re-injected at the pivot layer
    segments: np.ndarray
    mask_in: np.ndarray      # 1 over real (non-pad) input positions
    nsp_labels: np.ndarray | None = None
    row_kinds: list = field(default_factory=list)

    @property
    def size(self):
        return self.s.shape[0]

    @property
    def t_max(self):
        return self.s.shape[1]

    def mask_out(self):
        """Attention mask over output positions, derived from W's padding."""
        return (self.w != PAD).astype(np.float64)

    def validate(self, cfg=None):
        b, t = self.s.shape
        for name in ("w", "c", "order", "lang_in", "segments", "mask_in"):
            arr = getattr(self, name)
            if arr.shape != (b, t):
                raise ValueError(f"batch field {name} has shape {arr.shape}, expected {(b, t)}")
        if self.lang_out.shape != (b,):
            raise ValueError(f"lang_out has shape {self.lang_out.shape}, expected {(b,)}")
        if cfg is not None and t != cfg.t_max:
            raise ValueError(f"batch length {t} != configured t_max {cfg.t_max}")
        if ((self.c == 1) & (self.w == PAD)).any():
            raise ValueError("C marks a padded output position")
        if self.order.min() < 0 or self.order.max() >= t:
            raise ValueError("order entries outside [0, t_max)")
        kinds = self.row_kinds or [self.kind] * b
        if len(kinds) != b:
            raise ValueError("row_kinds length does not match batch size")
        successive = np.arange(t)
        for r, kind in enumerate(kinds):
            if kind in ("mlm", "tlm"):
                if not np.array_equal(self.order[r], successive):
                    raise ValueError(f"{kind} row {r} must use the successive alignment")
            elif kind == "cdlm":
                non_pad = self.w[r] != PAD
                if not np.array_equal(self.c[r] == 1, non_pad):
                    raise ValueError(f"cdlm row {r}: C must cover exactly the non-pad outputs")
            else:
                raise ValueError(f"unknown batch kind {kind!r}")
        return self


def concat_batches(a, b):
    """Interleave two batches of the same width into one physical batch."""
    if a.t_max != b.t_max:
        raise ValueError(f"cannot mix widths {a.t_max} and {b.t_max}")
    kinds = (a.row_kinds or [a.kind] * a.size) + (b.row_kinds or [b.kind] * b.size)
    nsp = None
    if a.nsp_labels is not None and b.nsp_labels is not None:
        nsp = np.concatenate([a.nsp_labels, b.nsp_labels])
    return UnifiedBatch(
        kind="mixed",
        s=np.concatenate([a.s, b.s]),
        w=np.concatenate([a.w, b.w]),
        c=np.concatenate([a.c, b.c]),
        order=np.concatenate([a.order, b.order]),
        lang_in=np.concatenate([a.lang_in, b.lang_in]),
        lang_out=np.concatenate([a.lang_out, b.lang_out]),
        segments=np.concatenate([a.segments, b.segments]),
        mask_in=np.concatenate([a.mask_in, b.mask_in]),
        nsp_labels=nsp,
        row_kinds=kinds,
    )


@dataclass
class ForwardResult:
    loss: Tensor        # cross entropy summed over the predict set C
    count: int          # |C|
    logits: Tensor      # (B, t_max, vocab)
    hidden: Tensor      # final hidden states (for the NSP head)
    losses: Tensor      # per-position cross entropy (zero outside C)

    def mean_loss(self):
        return float(self.loss.data) / max(self.count, 1)


class TransformerStack:
    """Parameters plus forward passes; training state lives elsewhere."""

    def __init__(self, cfg, params, rng=None):
        self.cfg = cfg
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, cfg, seed):
        """Fresh stack: truncated-normal weights (std 0.02), orthogonal
        language embedding, pivot layer copied from the last lower layer."""
        rng = np.random.default_rng(seed)
        p = ParamStore()
        d, v = cfg.d_model, cfg.vocab_size

        def tn(shape):
            return Tensor(truncated_normal(shape, 0.02, rng))

        p.add("emb.wrd", tn((v, d)))
        p.add("emb.pos", tn((cfg.t_max, d)))
        p.add("emb.seg", tn((cfg.n_segments, d)))
        p.add("emb.lng", orthogonal_init(cfg.n_languages, d, seed + 1))
        p.add("emb.ln.g", Tensor(np.ones(d)))
        p.add("emb.ln.b", Tensor(np.zeros(d)))

        half = cfg.n_layers // 2
        prefixes = [f"lower.{i}" for i in range(half)] + ["trilayer"] \
            + [f"upper.{i}" for i in range(half)]
        for prefix in prefixes:
            for name in ("q", "k", "v", "o"):
                p.add(f"{prefix}.attn.w{name}", tn((d, d)))
                p.add(f"{prefix}.attn.b{name}", Tensor(np.zeros(d)))
            p.add(f"{prefix}.ln1.g", Tensor(np.ones(d)))
            p.add(f"{prefix}.ln1.b", Tensor(np.zeros(d)))
            p.add(f"{prefix}.ffn.w1", tn((d, cfg.d_ff)))
            p.add(f"{prefix}.ffn.b1", Tensor(np.zeros(cfg.d_ff)))
            p.add(f"{prefix}.ffn.w2", tn((cfg.d_ff, d)))
            p.add(f"{prefix}.ffn.b2", Tensor(np.zeros(d)))
            p.add(f"{prefix}.ln2.g", Tensor(np.ones(d)))
            p.add(f"{prefix}.ln2.b", Tensor(np.zeros(d)))

        p.add("head.tr.w", tn((d, d)))
        p.add("head.tr.b", Tensor(np.zeros(d)))
        p.add("head.tr.ln.g", Tensor(np.ones(d)))
        p.add("head.tr.ln.b", Tensor(np.zeros(d)))
        p.add("head.bias", Tensor(np.zeros(v)))
        if not cfg.tie_lm_head:
            p.add("head.dec.w", tn((d, v)))
        p.add("head.nsp.w", tn((d, 2)))
        p.add("head.nsp.b", Tensor(np.zeros(2)))

        stack = cls(cfg, p, rng=np.random.default_rng(seed + 2))
        stack.init_trilayer_from_layer()
        return stack

    def init_trilayer_from_layer(self):
        """Copy the last lower-half layer's parameters into the pivot layer."""
        src = f"lower.{self.cfg.n_layers // 2 - 1}"
        for name in self.layer_param_names(src):
            dst = name.replace(src, "trilayer", 1)
            self.params[dst].data = self.params[name].data.copy()

    def layer_param_names(self, prefix):
        return [n for n in self.params.names() if n.startswith(prefix + ".")]

    def groups(self):
        """Partition of parameter names into the five freezing groups."""
        out = {g: [] for g in GROUPS}
        for name in self.params.names():
            if name.startswith("emb."):
                out["embeddings"].append(name)
            elif name.startswith("lower."):
                out["lower"].append(name)
            elif name.startswith("trilayer."):
                out["trilayer"].append(name)
            elif name.startswith("upper."):
                out["upper"].append(name)
            elif name.startswith("head."):
                out["heads"].append(name)
            else:
                raise AssertionError(f"parameter {name!r} outside the group partition")
        return out

    def freeze_groups(self, groups):
        """Freeze the named groups (optimizer skip + no gradient computation)."""
        for g in groups:
            for name in self.groups()[g]:
                self.params.freeze([name])
                self.params[name].requires_grad = False

    def unfreeze_all(self):
        self.params.unfreeze_all()
        for _, p in self.params.items():
            p.requires_grad = True

    def clone(self):
        new_params = ParamStore()
        for name, p in self.params.items():
            new_params.add(name, Tensor(p.data.copy()))
        return TransformerStack(self.cfg, new_params,
                                rng=copy.deepcopy(self.rng))

    # -- forward ------------------------------------------------------------

    def embed_input(self, batch, training=False):
        """H_0: sum of word, segment, position and language embeddings,
        then layer-norm and dropout."""
        p = self.params
        t = batch.s.shape[1]
        e = T.gather_rows(p["emb.wrd"], batch.s)
        e = e + T.gather_rows(p["emb.seg"], batch.segments)
        e = e + T.gather_rows(p["emb.pos"], np.arange(t))
        e = e + T.gather_rows(p["emb.lng"], batch.lang_in)
        h = T.layer_norm(e, p["emb.ln.g"], p["emb.ln.b"])
        return T.dropout(h, self.cfg.dropout, self.rng, training)

    def _attention(self, x, bias, prefix, training):
        p, cfg = self.params, self.cfg
        b, t, d = x.data.shape
        h, dh = cfg.n_heads, d // cfg.n_heads

        def heads(name):
            y = T.matmul(x, p[f"{prefix}.attn.w{name}"]) + p[f"{prefix}.attn.b{name}"]
            return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * T.tensor(1.0 / math.sqrt(dh))
        scores = scores + bias
        probs = T.dropout(T.softmax(scores), cfg.dropout, self.rng, training)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
        out = T.matmul(ctx, p[f"{prefix}.attn.wo"]) + p[f"{prefix}.attn.bo"]
        return T.dropout(out, cfg.dropout, self.rng, training)

    def _layer(self, x, bias, prefix, training):
        p = self.params
        h = T.layer_norm(x + self._attention(x, bias, prefix, training),
                         p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        f = T.matmul(T.gelu(T.matmul(h, p[f"{prefix}.ffn.w1"]) + p[f"{prefix}.ffn.b1"]),
                     p[f"{prefix}.ffn.w2"]) + p[f"{prefix}.ffn.b2"]
        f = T.dropout(f, self.cfg.dropout, self.rng, training)
        return T.layer_norm(h + f, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])

    @staticmethod
    def _bias(mask):
        return T.tensor((1.0 - mask)[:, None, None, :] * MASK_BIAS)

    def encode_lower(self, h, mask, training=False):
        bias = self._bias(mask)
        for i in range(self.cfg.n_layers // 2):
            h = self._layer(h, bias, f"lower.{i}", training)
        return h

    def reorder_hidden(self, h, order):
        """Gather lower-half hiddens into target order; pure index gather,
        so the gradient scatter-adds back."""
        return T.reorder(h, order)

    def trilayer_forward(self, h_o, lang_out, mask, training=False):
        """Pivot layer: re-add position rows and the broadcast target-language
        embedding (both lost in reordering), then one transformer layer."""
        p = self.params
        t = h_o.data.shape[1]
        pos = T.gather_rows(p["emb.pos"], np.arange(t))
        lng = T.reshape(T.gather_rows(p["emb.lng"], np.asarray(lang_out)),
                        (h_o.data.shape[0], 1, h_o.data.shape[2]))
        x = h_o + pos + lng
        return self._layer(x, self._bias(mask), "trilayer", training)

    def encode_upper(self, h, mask, training=False):
        bias = self._bias(mask)
        for i in range(self.cfg.n_layers // 2):
            h = self._layer(h, bias, f"upper.{i}", training)
        return h

    def lm_logits(self, h):
        p = self.params
        x = T.layer_norm(T.gelu(T.matmul(h, p["head.tr.w"]) + p["head.tr.b"]),
                         p["head.tr.ln.g"], p["head.tr.ln.b"])
        dec = T.transpose(p["emb.wrd"]) if self.cfg.tie_lm_head else p["head.dec.w"]
        return T.matmul(x, dec) + p["head.bias"]

    def nsp_logits(self, h):
        """Two-way next-sentence logits from the first position."""
        p = self.params
        first = T.reshape(T.reorder(h, np.zeros((h.data.shape[0], 1), dtype=np.int64)),
                          (h.data.shape[0], h.data.shape[2]))
        return T.matmul(first, p["head.nsp.w"]) + p["head.nsp.b"]

    def unified_forward(self, batch, training=False):
        """One pass over a unified batch; loss is summed over the predict
        set C (pads and unpredicted positions contribute exactly zero)."""
        batch.validate(self.cfg)
        mask_out = batch.mask_out()
        h = self.embed_input(batch, training)
        h = self.encode_lower(h, batch.mask_in, training)
        h = self.reorder_hidden(h, batch.order)
        h = self.trilayer_forward(h, batch.lang_out, mask_out, training)
        h = self.encode_upper(h, mask_out, training)
        logits = self.lm_logits(h)
        targets = np.where(batch.c == 1, batch.w, -100)
        losses = T.cross_entropy(logits, targets, ignore_index=-100)
        loss = T.tsum(losses)
        return ForwardResult(loss=loss, count=int(batch.c.sum()),
                             logits=logits, hidden=h, losses=losses)

    def mlm_forward(self, batch, training=False):
        """Dedicated MLM path (no reorder machinery): the oracle that the
        unified view must match on MLM-shaped batches."""
        mask = batch.mask_in
        h = self.embed_input(batch, training)
        h = self.encode_lower(h, mask, training)
        h = self.trilayer_forward(h, batch.lang_out, mask, training)
        h = self.encode_upper(h, mask, training)
        logits = self.lm_logits(h)
        targets = np.where(batch.c == 1, batch.w, -100)
        losses = T.cross_entropy(logits, targets, ignore_index=-100)
        loss = T.tsum(losses)
        return ForwardResult(loss=loss, count=int(batch.c.sum()),
                             logits=logits, hidden=h, losses=losses)


def mask_for_mlm(x, rng, vocab_size, rate=0.15, n_specials=len(SPECIALS)):
    """BERT-style masking: select `rate` of the non-special positions; of
    those, 80% -> [MASK], 10% -> a random non-special id, 10% unchanged.

    Returns (masked ids S, predict indicator C, original ids W).
    """
    from lmbridge.subword import MASK as MASK_ID

    x = np.asarray(x)
    eligible = x >= n_specials
    selected = (rng.random(x.shape) < rate) & eligible
    action = rng.random(x.shape)
    randoms = rng.integers(n_specials, vocab_size, size=x.shape)
    s = x.copy()
    s[selected & (action < 0.8)] = MASK_ID
    swap = selected & (action >= 0.8) & (action < 0.9)
    s[swap] = randoms[swap]
    return s, selected.astype(np.int64), x.copy()
