"""The three training phases and their contracts.

Phase 1 (commonality): joint MLM over both languages' monolingual text with
the backbone frozen; only embeddings and the pivot layer move.  Phase 2
(transfer): two directional models trained sequentially from the phase-1
weights, each with one half frozen, co-training CdLM with target-language
MLM in the same mini-batch, then combined.  Phase 3 (language-specific):
everything trainable, target-language MLM plus next-sentence prediction.

Frozen parameter groups are byte-compared against a snapshot at every
checkpoint interval and at phase end; a mismatch is a bug and raises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import lmbridge.tensor as T
from lmbridge.checkpoint import rng_from_meta, rng_state_to_meta, save_stack
from lmbridge.data import (make_cdlm_batch, make_mlm_batch, make_nsp_batch,
                           make_tlm_batch)
from lmbridge.model import concat_batches
from lmbridge.optim import adam_step


@dataclass
class PhaseConfig:
    phase: str                    # commonality | transfer | specific | pretrain
    steps: int
    batch: int
    peak_lr: float
    warmup: float = 0.1
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    seed: int = 0
    checkpoint_every: int = 0     # 0 disables periodic checkpoints
    checkpoint_path: str = ""
    use_cdlm: bool = True         # transfer phase: False gives the MLM+TLM arm
    use_nsp: bool = True          # specific phase

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError(f"warmup fraction must be in [0, 1), got {self.warmup}")


def lr_schedule(step, cfg):
    """Linear warmup to the peak over warmup*steps, then linear decay to 0
    at step == steps."""
    w = cfg.warmup * cfg.steps
    if w > 0 and step < w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * (cfg.steps - step) / (cfg.steps - w)


class TrainState:
    """Step counter, the single RNG stream, and the metric log."""

    def __init__(self, seed=0, step=0, rng=None):
        self.step = step
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.metrics = []

    def log(self, phase, objective, loss, lr):
        self.metrics.append({"step": self.step, "phase": phase,
                             "objective": objective, "loss": float(loss), "lr": lr})

    def to_meta(self):
        return {"step": self.step, "rng": rng_state_to_meta(self.rng)}

    @classmethod
    def from_meta(cls, meta):
        return cls(step=meta["step"], rng=rng_from_meta(meta["rng"]))


def metrics_to_csv(rows):
    lines = ["step,phase,objective,loss,lr"]
    for r in rows:
        lines.append(f"{r['step']},{r['phase']},{r['objective']},"
                     f"{repr(r['loss'])},{repr(r['lr'])}")
    return "\n".join(lines) + "\n"


class _FrozenWatch:
    """Byte-level invariance assertion over the frozen parameter groups."""

    def __init__(self, stack):
        self.names = list(stack.params.frozen_names())
        self.snapshot = {n: stack.params[n].data.tobytes() for n in self.names}

    def check(self, stack, where):
        for n in self.names:
            if stack.params[n].data.tobytes() != self.snapshot[n]:
                raise AssertionError(f"frozen parameter {n!r} changed bytes ({where})")


def _mean_loss(fwd):
    return T.mul(fwd.loss, T.tensor(1.0 / max(fwd.count, 1)))


def _maybe_checkpoint(stack, state, cfg, watch, phase_tag):
    if cfg.checkpoint_every and cfg.checkpoint_path \
            and state.step % cfg.checkpoint_every == 0:
        watch.check(stack, f"step {state.step}")
        save_stack(cfg.checkpoint_path, stack,
                   meta={"phase": phase_tag, "train_state": state.to_meta()})


def _sample_sentences(corpus, rng, n):
    ids = rng.integers(0, len(corpus.sentences), size=n)
    return [corpus.sentences[int(i)] for i in ids]


def phase1_commonality(stack, src_corpus, tgt_corpus, cfg, aligned_word_vectors,
                       state=None, languages=(0, 1)):
    """Joint MLM with the backbone frozen; batches alternate languages.

    aligned_word_vectors (|V| x d) seeds the word embedding; pass the
    stack's own rows explicitly to skip re-initialization (the ablation
    arms do this on purpose).
    """
    if aligned_word_vectors is None:
        raise ValueError("phase 1 needs aligned word vectors for the embedding init")
    wrd = stack.params["emb.wrd"]
    if np.shape(aligned_word_vectors) != wrd.data.shape:
        raise ValueError(f"aligned embedding shape {np.shape(aligned_word_vectors)} "
                         f"!= word embedding {wrd.data.shape}")
    wrd.data = np.array(aligned_word_vectors, dtype=np.float64)

    stack.unfreeze_all()
    stack.freeze_groups(["lower", "upper", "heads"])
    state = state or TrainState(seed=cfg.seed)
    stack.rng = state.rng
    watch = _FrozenWatch(stack)
    corpora = {languages[0]: src_corpus, languages[1]: tgt_corpus}
    vocab_size = stack.cfg.vocab_size

    while state.step < cfg.steps:
        lr = lr_schedule(state.step, cfg)
        lang = languages[state.step % 2]
        sents = _sample_sentences(corpora[lang], state.rng, cfg.batch)
        batch = make_mlm_batch(sents, vocab_size, stack.cfg.t_max, lang,
                               state.rng, mask_rate=cfg.mask_rate)
        fwd = stack.unified_forward(batch, training=True)
        loss = _mean_loss(fwd)
        loss.backward()
        adam_step(stack.params, lr, weight_decay=cfg.weight_decay)
        state.step += 1
        state.log("commonality", f"mlm.lang{lang}", float(loss.data), lr)
        _maybe_checkpoint(stack, state, cfg, watch, "commonality")

    watch.check(stack, "phase end")
    return stack, state


def phase2_transfer(stack_ct, parallel, alignments_fwd, alignments_rev, cfg,
                    languages=(0, 1), state=None):
    """Two directional models from the commonality weights, then combination.

    Direction j=0 translates language 0 -> 1 with the lower half fixed;
    j=1 translates 1 -> 0 with the upper half fixed.  Every step draws one
    mixed mini-batch: CdLM pairs in the model's direction plus masked MLM
    on the overall target language (language 1) text, losses summed 1:1.
    Pairs with a missing alignment are skipped and counted.
    """
    directional = []
    state = state or TrainState(seed=cfg.seed)
    skipped = 0

    for j in (0, 1):
        model = stack_ct.clone()
        model.unfreeze_all()
        model.freeze_groups(["lower"] if j == 0 else ["upper"])
        model.rng = state.rng
        watch = _FrozenWatch(model)
        aligns = alignments_fwd if j == 0 else alignments_rev
        lang_src, lang_tgt = (languages[0], languages[1]) if j == 0 else (languages[1], languages[0])
        tag = f"transfer.{lang_src}to{lang_tgt}"
        half = max(1, cfg.batch // 2)
        step0 = state.step

        while state.step - step0 < cfg.steps:
            lr = lr_schedule(state.step - step0, cfg)
            ids = [int(i) for i in state.rng.integers(0, len(parallel.pairs), size=half)]
            usable = [i for i in ids if aligns[i] is not None]
            skipped += len(ids) - len(usable)

            pairs = []
            for i in usable:
                s, t = parallel.pairs[i]
                pairs.append((s, t) if j == 0 else (t, s))
            mlm_sents = [parallel.pairs[int(i)][1]
                         for i in state.rng.integers(0, len(parallel.pairs), size=half)]
            mlm_batch = make_mlm_batch(mlm_sents, stack_ct.cfg.vocab_size,
                                       stack_ct.cfg.t_max, languages[1],
                                       state.rng, mask_rate=cfg.mask_rate)
            if cfg.use_cdlm and pairs:
                cd_batch = make_cdlm_batch(pairs, [aligns[i] for i in usable],
                                           stack_ct.cfg.t_max, lang_src, lang_tgt)
                mixed = concat_batches(cd_batch, mlm_batch)
                fwd = model.unified_forward(mixed, training=True)
                cd_rows = np.zeros_like(mixed.c, dtype=np.float64)
                cd_rows[:cd_batch.size] = mixed.c[:cd_batch.size]
                mlm_rows = np.zeros_like(mixed.c, dtype=np.float64)
                mlm_rows[cd_batch.size:] = mixed.c[cd_batch.size:]
                cd_loss = T.masked_mean(fwd.losses, cd_rows)
                mlm_loss = T.masked_mean(fwd.losses, mlm_rows)
                loss = T.add(cd_loss, mlm_loss)
                state.log(tag, "cdlm", float(cd_loss.data), lr)
                state.log(tag, "mlm", float(mlm_loss.data), lr)
            else:
                # The "w/o CdLM" arm: joint MLM + TLM on the same data budget.
                tlm_batch = make_tlm_batch(pairs or [parallel.pairs[i] for i in ids],
                                           stack_ct.cfg.vocab_size, stack_ct.cfg.t_max,
                                           lang_src, lang_tgt, state.rng,
                                           mask_rate=cfg.mask_rate)
                mixed = concat_batches(tlm_batch, mlm_batch)
                fwd = model.unified_forward(mixed, training=True)
                loss = _mean_loss(fwd)
                state.log(tag, "tlm+mlm", float(loss.data), lr)
            loss.backward()
            adam_step(model.params, lr, weight_decay=cfg.weight_decay)
            state.step += 1
            _maybe_checkpoint(model, state, cfg, watch, tag)

        watch.check(model, "phase end")
        directional.append(model)

    combined = combine_models(directional[0], directional[1])
    return directional[0], directional[1], combined, state, skipped


def combine_models(a, b):
    """Merge the two directional models: upper half from the 0->1 model,
    lower half from the 1->0 model (bit-copied), all remaining parameters
    averaged elementwise.  Optimizer state starts fresh."""
    if a.cfg.to_dict() != b.cfg.to_dict():
        raise ValueError("cannot combine stacks with different configs")
    combined = a.clone()
    combined.unfreeze_all()
    groups = combined.groups()
    for name in groups["lower"]:
        combined.params[name].data = b.params[name].data.copy()
    for name in groups["upper"]:
        combined.params[name].data = a.params[name].data.copy()
    for g in ("embeddings", "trilayer", "heads"):
        for name in groups[g]:
            combined.params[name].data = (a.params[name].data + b.params[name].data) / 2.0
    return combined


def phase3_language_specific(stack, tgt_corpus, cfg, state=None, lang_id=1):
    """Target-language MLM plus NSP with everything trainable.

    If the corpus has no multi-sentence documents, NSP is disabled with a
    warning flag in the returned state (plain MLM batches are used).
    """
    stack.unfreeze_all()
    state = state or TrainState(seed=cfg.seed)
    stack.rng = state.rng
    watch = _FrozenWatch(stack)  # empty set; still validates the mechanism
    nsp_possible = any(len(d) >= 2 for d in tgt_corpus.documents)
    use_nsp = cfg.use_nsp and nsp_possible
    if cfg.use_nsp and not nsp_possible:
        state.log("specific", "nsp.disabled", 0.0, 0.0)

    while state.step < cfg.steps:
        lr = lr_schedule(state.step, cfg)
        if use_nsp:
            batch = make_nsp_batch(tgt_corpus, stack.cfg.vocab_size, stack.cfg.t_max,
                                   lang_id, state.rng, cfg.batch,
                                   mask_rate=cfg.mask_rate)
            fwd = stack.unified_forward(batch, training=True)
            mlm_loss = _mean_loss(fwd)
            nsp_logits = stack.nsp_logits(fwd.hidden)
            nsp_ce = T.cross_entropy(nsp_logits, batch.nsp_labels)
            nsp_loss = T.masked_mean(nsp_ce, np.ones(batch.size))
            loss = T.add(mlm_loss, nsp_loss)
            state.log("specific", "mlm", float(mlm_loss.data), lr)
            state.log("specific", "nsp", float(nsp_loss.data), lr)
        else:
            sents = _sample_sentences(tgt_corpus, state.rng, cfg.batch)
            batch = make_mlm_batch(sents, stack.cfg.vocab_size, stack.cfg.t_max,
                                   lang_id, state.rng, mask_rate=cfg.mask_rate)
            fwd = stack.unified_forward(batch, training=True)
            loss = _mean_loss(fwd)
            state.log("specific", "mlm", float(loss.data), lr)
        loss.backward()
        adam_step(stack.params, lr, weight_decay=cfg.weight_decay)
        state.step += 1
        _maybe_checkpoint(stack, state, cfg, watch, "specific")

    watch.check(stack, "phase end")
    return stack, state


def pretrain_mlm(stack, corpus, cfg, state=None, lang_id=0):
    """Plain MLM pretraining with nothing frozen; used to fabricate the
    desk-scale donor model whose raw embedding space is the alignment
    target."""
    stack.unfreeze_all()
    state = state or TrainState(seed=cfg.seed)
    stack.rng = state.rng
    while state.step < cfg.steps:
        lr = lr_schedule(state.step, cfg)
        sents = _sample_sentences(corpus, state.rng, cfg.batch)
        batch = make_mlm_batch(sents, stack.cfg.vocab_size, stack.cfg.t_max,
                               lang_id, state.rng, mask_rate=cfg.mask_rate)
        fwd = stack.unified_forward(batch, training=True)
        loss = _mean_loss(fwd)
        loss.backward()
        adam_step(stack.params, lr, weight_decay=cfg.weight_decay)
        state.step += 1
        state.log("pretrain", "mlm", float(loss.data), lr)
    return stack, state
