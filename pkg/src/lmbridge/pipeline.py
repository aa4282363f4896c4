"""End-to-end pipeline: synthetic data, vocabulary, static embeddings, the
desk-scale donor model, embedding alignment, word alignment, the three
training phases, and evaluation.  The file-based runner caches each stage
on the content hashes of its inputs; the in-memory helpers are shared with
the ablation sweeps.

With no real donor model available, a small one is fabricated by MLM
pretraining on the source-language corpus; its word-embedding rows (for
tokens that occur in that corpus) are the alignment target space, and its
transformer layers are the frozen backbone the transfer starts from.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from lmbridge import subword
from lmbridge.checkpoint import load_checkpoint, load_stack, save_checkpoint, save_stack
from lmbridge.data import (Corpus, ParallelCorpus, load_mono, load_parallel,
                           parallel_from_synth, synth_langpair, synth_mono,
                           SynthConfig)
from lmbridge.embalign import (AlignConfig, LinearMap, adversarial_align,
                               procrustes_refine)
from lmbridge.evalkit import bleu, bpw, generate_cdlm, token_accuracy
from lmbridge.model import ModelConfig, TransformerStack
from lmbridge.skipgram import EmbeddingSpace, train_skipgram
from lmbridge.subword import Vocab, train_wordpiece
from lmbridge.trainer import (PhaseConfig, TrainState, metrics_to_csv,
                              phase1_commonality, phase2_transfer,
                              phase3_language_specific, pretrain_mlm)
from lmbridge.wordalign import align_pair, save_pharaoh, train_ibm1

SRC_LANG, TGT_LANG = 0, 1


def stage_seed(base, name):
    digest = hashlib.sha256(f"{base}:{name}".encode()).hexdigest()
    return int(digest[:8], 16)


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def model_config(cfg, vocab_size):
    return ModelConfig(
        n_layers=cfg["model.n_layers"], d_model=cfg["model.d_model"],
        n_heads=cfg["model.n_heads"], d_ff=cfg["model.d_ff"],
        t_max=cfg["model.t_max"], vocab_size=vocab_size,
        dropout=cfg["model.dropout"])


def phase_config(cfg, phase):
    extras = {}
    if phase == "phase2":
        extras["use_cdlm"] = cfg["phase2.use_cdlm"]
    if phase == "phase3":
        extras["use_nsp"] = cfg["phase3.use_nsp"]
    name = {"phase1": "commonality", "phase2": "transfer",
            "phase3": "specific", "donor": "pretrain"}[phase]
    key = "donor" if phase == "donor" else phase
    return PhaseConfig(
        phase=name, steps=cfg[f"{key}.steps"], batch=cfg[f"{key}.batch"],
        peak_lr=cfg[f"{key}.lr"], warmup=cfg["train.warmup"],
        weight_decay=cfg["train.weight_decay"], mask_rate=cfg["train.mask_rate"],
        checkpoint_every=cfg["train.checkpoint_every"], **extras)


# ---------------------------------------------------------------------------
# in-memory stage helpers

def generate_synthetic(cfg, seed):
    """All synthetic corpora for one world: parallel train/heldout plus
    topic-structured monolingual documents per language and a held-out
    target evaluation set."""
    scfg = SynthConfig(
        src_vocab=cfg["synth.src_vocab"], tgt_vocab=cfg["synth.src_vocab"],
        particles=cfg["synth.particles"],
        sentences=cfg["synth.sentences"] + cfg["synth.heldout"],
        len_range=(cfg["synth.len_lo"], cfg["synth.len_hi"]),
        rule=cfg["synth.rule"], particle_prob=cfg["synth.particle_prob"],
        n_topics=cfg["synth.topics"], seed=stage_seed(seed, "synth"))
    pair = synth_langpair(scfg)
    mono = {
        "src": synth_mono(pair.src_words, cfg["synth.mono_docs"], cfg["synth.mono_sents"],
                          (cfg["synth.len_lo"], cfg["synth.len_hi"]), cfg["synth.topics"],
                          stage_seed(seed, "mono.src")),
        "tgt": synth_mono(pair.tgt_words, cfg["synth.mono_docs"], cfg["synth.mono_sents"],
                          (cfg["synth.len_lo"], cfg["synth.len_hi"]), cfg["synth.topics"],
                          stage_seed(seed, "mono.tgt")),
        "eval": synth_mono(pair.tgt_words, cfg["synth.eval_docs"], cfg["synth.mono_sents"],
                           (cfg["synth.len_lo"], cfg["synth.len_hi"]), cfg["synth.topics"],
                           stage_seed(seed, "mono.eval")),
    }
    return pair, mono


@dataclass
class World:
    """Everything the training phases consume, in memory."""
    vocab: Vocab
    model_cfg: ModelConfig
    src_corpus: Corpus
    tgt_corpus: Corpus
    eval_corpus: Corpus
    parallel: ParallelCorpus        # training pairs with gold alignments
    heldout: ParallelCorpus         # evaluation pairs with gold alignments
    synth: object                   # the SynthPair (word lists, dictionary)
    v_space: EmbeddingSpace         # joint skipgram embeddings
    src_token_ids: np.ndarray       # tokens present in the source corpus


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def build_world(cfg, seed, workdir=None):
    """Generate data, train the vocabulary and the joint skipgram space.

    When workdir is given the corpora are also written out (the file-based
    pipeline reuses this)."""
    pair, mono = generate_synthetic(cfg, seed)
    train_lines_src = pair.src_lines[:cfg["synth.sentences"]]
    train_lines_tgt = pair.tgt_lines[:cfg["synth.sentences"]]

    texts = {
        "src_mono.txt": mono["src"],
        "tgt_mono.txt": mono["tgt"],
        "eval_tgt.txt": mono["eval"],
        "parallel.tsv": "".join(f"{s}\t{t}\n" for s, t in zip(train_lines_src, train_lines_tgt)),
        "heldout.tsv": "".join(
            f"{s}\t{t}\n" for s, t in zip(pair.src_lines[cfg["synth.sentences"]:],
                                          pair.tgt_lines[cfg["synth.sentences"]:])),
        "dict.tsv": "".join(f"{s}\t{t}\n" for s, t in pair.dictionary),
    }
    if workdir:
        os.makedirs(os.path.join(workdir, "data"), exist_ok=True)
        for name, text in texts.items():
            _write(os.path.join(workdir, "data", name), text)

    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for name in ("src_mono.txt", "tgt_mono.txt", "parallel_flat.txt"):
            p = os.path.join(tmp, name)
            if name == "parallel_flat.txt":
                flat = texts["parallel.tsv"].replace("\t", "\n")
                _write(p, flat)
            else:
                _write(p, texts[name])
            paths.append(p)
        vocab = train_wordpiece(paths, cfg["vocab.size"], cfg["vocab.alphabet"],
                                seed=stage_seed(seed, "vocab"))

    mcfg = model_config(cfg, len(vocab))
    t_max = mcfg.t_max

    def corpus_from_text(text):
        import tempfile as tf
        with tf.NamedTemporaryFile("w", suffix=".txt", delete=False, encoding="utf-8") as fh:
            fh.write(text)
            name = fh.name
        try:
            return load_mono(name, vocab, t_max)
        finally:
            os.unlink(name)

    src_corpus = corpus_from_text(texts["src_mono.txt"])
    tgt_corpus = corpus_from_text(texts["tgt_mono.txt"])
    eval_corpus = corpus_from_text(texts["eval_tgt.txt"])

    n_train = cfg["synth.sentences"]
    full = parallel_from_synth(pair, vocab, t_max)
    parallel = ParallelCorpus(full.pairs[:n_train], full.gold_alignments[:n_train])
    heldout = ParallelCorpus(full.pairs[n_train:], full.gold_alignments[n_train:])

    sentences = src_corpus.sentences + tgt_corpus.sentences \
        + [s for s, _ in parallel.pairs] + [t for _, t in parallel.pairs]
    v_space = train_skipgram(sentences, len(vocab), mcfg.d_model,
                             window=cfg["skipgram.window"],
                             negatives=cfg["skipgram.negatives"],
                             epochs=cfg["skipgram.epochs"], lr=cfg["skipgram.lr"],
                             seed=stage_seed(seed, "skipgram"), vocab=vocab)

    present = np.zeros(len(vocab), dtype=bool)
    for sent in src_corpus.sentences:
        present[sent] = True
    present[:len(subword.SPECIALS)] = False
    src_token_ids = np.nonzero(present)[0]

    return World(vocab=vocab, model_cfg=mcfg, src_corpus=src_corpus,
                 tgt_corpus=tgt_corpus, eval_corpus=eval_corpus,
                 parallel=parallel, heldout=heldout, synth=pair,
                 v_space=v_space, src_token_ids=src_token_ids)


def build_donor(world, cfg, seed):
    """Fabricate the donor: a fresh stack MLM-pretrained on source text."""
    stack = TransformerStack.build(world.model_cfg, stage_seed(seed, "donor.init"))
    pcfg = phase_config(cfg, "donor")
    state = TrainState(seed=stage_seed(seed, "donor.train"))
    stack, state = pretrain_mlm(stack, world.src_corpus, pcfg, state=state,
                                lang_id=SRC_LANG)
    return stack, state


def donor_u_space(donor, world):
    """The alignment target: donor word-embedding rows for tokens that
    actually occur in the donor's training corpus."""
    rows = donor.params["emb.wrd"].data[world.src_token_ids]
    return EmbeddingSpace(rows)


def align_embeddings(world, donor, cfg, seed, v_matrix=None):
    """Adversarial alignment plus refinement of the joint static space onto
    the donor space, restricted to tokens present in both; returns the map
    and the full aligned E_wrd init (W applied to every joint-vocab row)."""
    u_space = donor_u_space(donor, world)
    vecs = world.v_space.vectors if v_matrix is None else v_matrix
    v_sub = EmbeddingSpace(vecs[world.src_token_ids])
    acfg = AlignConfig(steps=cfg["align.steps"], batch=cfg["align.batch"],
                       lr_d=cfg["align.lr_d"], lr_w=cfg["align.lr_w"],
                       smoothing=cfg["align.smoothing"],
                       seed=stage_seed(seed, "embalign"))
    mapping, log = adversarial_align(u_space, v_sub, acfg)
    if cfg["align.refine_rounds"] > 0:
        mapping = procrustes_refine(mapping, u_space, v_sub,
                                    rounds=cfg["align.refine_rounds"])
    full_norm = EmbeddingSpace(vecs).normalize().vectors
    aligned = mapping.apply(full_norm)
    return mapping, aligned, log


def stack_from_donor(donor, e_wrd_init, seed):
    """Phase-1 starting point: donor backbone and heads, fresh orthogonal
    language embedding, pivot layer re-copied from the donor's middle
    layer, word embedding as given."""
    stack = donor.clone()
    stack.unfreeze_all()
    from lmbridge.tensor import orthogonal_init
    stack.params["emb.lng"].data = orthogonal_init(
        donor.cfg.n_languages, donor.cfg.d_model, stage_seed(seed, "lng")).data
    stack.init_trilayer_from_layer()
    stack.params["emb.wrd"].data = np.array(e_wrd_init, dtype=np.float64)
    return stack


def compute_alignments(world, cfg):
    """IBM-1 in both directions plus symmetrized per-pair alignments for
    both translation directions."""
    pairs = world.parallel.pairs
    fwd_table = train_ibm1(pairs, cfg["ibm1.iterations"])
    rev_table = train_ibm1([(t, s) for s, t in pairs], cfg["ibm1.iterations"])
    mode = cfg["align.mode"]
    fwd = [align_pair(s, t, fwd_table, rev_table, mode=mode) for s, t in pairs]
    rev = [align_pair(t, s, rev_table, fwd_table, mode=mode) for s, t in pairs]
    return fwd_table, rev_table, fwd, rev


def dictionary_id_map(dictionary, vocab):
    """Source token id -> target token id under the gold dictionary."""
    out = {}
    for s_word, t_word in dictionary:
        s_ids = subword.encode(s_word, vocab)
        t_ids = subword.encode(t_word, vocab)
        if len(s_ids) == 1 and len(t_ids) == 1:
            out[s_ids[0]] = t_ids[0]
    return out


def evaluate_translation(stack, heldout, dmap, vocab, max_pairs=300):
    """Generate for held-out pairs; BLEU against the true targets and
    positionwise accuracy against the word-for-word dictionary image."""
    hyps, refs, word_refs, word_hyps = [], [], [], []
    for src, tgt in heldout.pairs[:max_pairs]:
        out = generate_cdlm(stack, src, SRC_LANG, TGT_LANG)
        hyps.append([vocab.token_of(i) for i in out])
        refs.append([vocab.token_of(i) for i in tgt])
        word_hyps.append(out)
        word_refs.append([dmap.get(s, -1) for s in src])
    scores = bleu(hyps, refs, max_n=4, unit="word")
    acc = token_accuracy(word_hyps, word_refs)
    return {"bleu": scores, "token_accuracy": acc}


def evaluate_world_translation(stack, world, max_pairs=300):
    dmap = dictionary_id_map(world.synth.dictionary, world.vocab)
    return evaluate_translation(stack, world.heldout, dmap, world.vocab, max_pairs)


# ---------------------------------------------------------------------------
# full in-memory run (used by the acceptance suite and the ablations)

def run_transfer(cfg, seed, use_cdlm=True, phase3=True, world=None, donor=None,
                 aligned=None, alignments=None):
    """The whole procedure from data generation to the final checkpoint.

    Pieces already built (world, donor, aligned init, alignments) can be
    passed in so sweeps share them across arms.
    """
    world = world or build_world(cfg, seed)
    donor = donor if donor is not None else build_donor(world, cfg, seed)[0]
    if aligned is None:
        _, aligned, _ = align_embeddings(world, donor, cfg, seed)
    if alignments is None:
        _, _, fwd, rev = compute_alignments(world, cfg)
    else:
        fwd, rev = alignments

    stack = stack_from_donor(donor, aligned, seed)
    p1 = phase_config(cfg, "phase1")
    state = TrainState(seed=stage_seed(seed, "phase1"))
    stack, state = phase1_commonality(stack, world.src_corpus, world.tgt_corpus,
                                      p1, aligned, state=state)

    p2 = phase_config(cfg, "phase2")
    p2.use_cdlm = use_cdlm
    state2 = TrainState(seed=stage_seed(seed, "phase2"))
    model_a, model_b, combined, state2, skipped = phase2_transfer(
        stack, world.parallel, fwd, rev, p2, state=state2)

    final = combined
    state3 = None
    if phase3:
        p3 = phase_config(cfg, "phase3")
        state3 = TrainState(seed=stage_seed(seed, "phase3"))
        final, state3 = phase3_language_specific(combined, world.tgt_corpus, p3,
                                                 state=state3, lang_id=TGT_LANG)
    metrics = state.metrics + state2.metrics + (state3.metrics if state3 else [])
    return {"world": world, "donor": donor, "phase1": stack, "model_a": model_a,
            "model_b": model_b, "combined": combined, "final": final,
            "metrics": metrics, "skipped_pairs": skipped}


# ---------------------------------------------------------------------------
# ablation sweeps

INIT4_ARMS = ("rand", "rand_adv", "skipgram", "skipgram_adv")


def init4_inits(world, donor, cfg, seed):
    """The four word-embedding initializations of the ablation."""
    rng = np.random.default_rng(stage_seed(seed, "init4.rand"))
    from lmbridge.tensor import truncated_normal
    rand = truncated_normal((len(world.vocab), world.model_cfg.d_model), 0.02, rng)
    rand_space = np.random.default_rng(stage_seed(seed, "init4.randspace")) \
        .standard_normal(rand.shape)
    _, rand_adv, _ = align_embeddings(world, donor, cfg, stage_seed(seed, "init4.ra"),
                                      v_matrix=rand_space)
    skip = world.v_space.normalize().vectors
    _, skip_adv, _ = align_embeddings(world, donor, cfg, seed)
    return {"rand": rand, "rand_adv": rand_adv, "skipgram": skip,
            "skipgram_adv": skip_adv}


def ablation_init4(cfg, seeds, checkpoints=None):
    """Phase-1 BPW under the four embedding initializations at two step
    checkpoints; rows of arm/checkpoint/metric/value/seed."""
    checkpoints = checkpoints or (cfg["phase1.steps"], 2 * cfg["phase1.steps"])
    rows = []
    for seed in seeds:
        world = build_world(cfg, seed)
        donor, _ = build_donor(world, cfg, seed)
        inits = init4_inits(world, donor, cfg, seed)
        for arm in INIT4_ARMS:
            stack = stack_from_donor(donor, inits[arm], seed)
            p1 = phase_config(cfg, "phase1")
            state = TrainState(seed=stage_seed(seed, f"init4.{arm}"))
            for ck in checkpoints:
                p1_ck = PhaseConfig(phase="commonality", steps=ck, batch=p1.batch,
                                    peak_lr=p1.peak_lr, warmup=p1.warmup,
                                    weight_decay=p1.weight_decay,
                                    mask_rate=p1.mask_rate)
                stack, state = phase1_commonality(
                    stack, world.src_corpus, world.tgt_corpus, p1_ck,
                    stack.params["emb.wrd"].data, state=state)
                value = bpw(stack, world.eval_corpus, cfg["eval.mask_seed"],
                            lang_id=TGT_LANG, batch_size=cfg["eval.batch"],
                            mask_rate=cfg["train.mask_rate"])
                rows.append({"arm": arm, "checkpoint": ck, "metric": "bpw",
                             "value": value, "seed": seed})
    return rows


def init4_medians(rows):
    """Median BPW per (arm, checkpoint) across seeds."""
    out = {}
    for r in rows:
        out.setdefault((r["arm"], r["checkpoint"]), []).append(r["value"])
    return {k: float(np.median(v)) for k, v in out.items()}


def init4_ordering_holds(rows):
    """The expected ordering at every checkpoint:
    skipgram_adv < skipgram < rand_adv < rand (3-seed medians)."""
    med = init4_medians(rows)
    checkpoints = sorted({ck for _, ck in med})
    for ck in checkpoints:
        if not (med[("skipgram_adv", ck)] < med[("skipgram", ck)]
                < med[("rand_adv", ck)] < med[("rand", ck)]):
            return False
    return True


def ablation_parallel_scale(cfg, sizes, seeds):
    """Phase-2 BPW (after combination) as the parallel corpus grows; the
    zero arm trains without CdLM batches."""
    rows = []
    for seed in seeds:
        world = build_world(cfg, seed)
        donor, _ = build_donor(world, cfg, seed)
        _, aligned, _ = align_embeddings(world, donor, cfg, seed)
        _, _, fwd, rev = compute_alignments(world, cfg)

        stack = stack_from_donor(donor, aligned, seed)
        p1 = phase_config(cfg, "phase1")
        state = TrainState(seed=stage_seed(seed, "phase1"))
        stack, state = phase1_commonality(stack, world.src_corpus, world.tgt_corpus,
                                          p1, aligned, state=state)
        for size in sizes:
            p2 = phase_config(cfg, "phase2")
            state2 = TrainState(seed=stage_seed(seed, f"scale.{size}"))
            if size == 0:
                sub, f_sub, r_sub = world.parallel, fwd, rev
                p2.use_cdlm = False
            else:
                sub = ParallelCorpus(world.parallel.pairs[:size],
                                     world.parallel.gold_alignments[:size])
                f_sub, r_sub = fwd[:size], rev[:size]
                p2.use_cdlm = True
            _, _, combined, _, _ = phase2_transfer(
                stack.clone(), sub, f_sub, r_sub, p2, state=state2)
            value = bpw(combined, world.eval_corpus, cfg["eval.mask_seed"],
                        lang_id=TGT_LANG, batch_size=cfg["eval.batch"],
                        mask_rate=cfg["train.mask_rate"])
            rows.append({"arm": f"parallel{size}", "checkpoint": size,
                         "metric": "bpw", "value": value, "seed": seed})
    return rows


def parallel_scale_nonincreasing(rows, sizes):
    med = {}
    for r in rows:
        med.setdefault(r["checkpoint"], []).append(r["value"])
    med = {k: float(np.median(v)) for k, v in med.items()}
    values = [med[s] for s in sizes]
    return all(b <= a + 1e-9 for a, b in zip(values, values[1:])), values


# ---------------------------------------------------------------------------
# file-based pipeline with per-stage caching

def _paths(out):
    d = os.path.join(out, "data")
    return {
        "src_mono": os.path.join(d, "src_mono.txt"),
        "tgt_mono": os.path.join(d, "tgt_mono.txt"),
        "eval_tgt": os.path.join(d, "eval_tgt.txt"),
        "parallel": os.path.join(d, "parallel.tsv"),
        "heldout": os.path.join(d, "heldout.tsv"),
        "dict": os.path.join(d, "dict.tsv"),
        "vocab": os.path.join(out, "vocab.tsv"),
        "vspace": os.path.join(out, "vspace.txt"),
        "donor": os.path.join(out, "donor.ckpt"),
        "embalign": os.path.join(out, "embalign.ckpt"),
        "align_fwd": os.path.join(out, "alignments.fwd.ph"),
        "align_rev": os.path.join(out, "alignments.rev.ph"),
        "phase1": os.path.join(out, "phase1.ckpt"),
        "phase2_a": os.path.join(out, "phase2.a.ckpt"),
        "phase2_b": os.path.join(out, "phase2.b.ckpt"),
        "phase2": os.path.join(out, "phase2.ckpt"),
        "final": os.path.join(out, "final.ckpt"),
        "eval": os.path.join(out, "eval.json"),
    }


def _load_vocab_world(cfg, out):
    """The file-side counterpart of build_world: everything reloaded from
    stage artifacts (no gold alignments; the learned aligner provides A)."""
    p = _paths(out)
    vocab = Vocab.load(p["vocab"])
    mcfg = model_config(cfg, len(vocab))
    src_corpus = load_mono(p["src_mono"], vocab, mcfg.t_max)
    tgt_corpus = load_mono(p["tgt_mono"], vocab, mcfg.t_max)
    eval_corpus = load_mono(p["eval_tgt"], vocab, mcfg.t_max)
    parallel = load_parallel(p["parallel"], vocab, mcfg.t_max)
    heldout = load_parallel(p["heldout"], vocab, mcfg.t_max)
    present = np.zeros(len(vocab), dtype=bool)
    for sent in src_corpus.sentences:
        present[sent] = True
    present[:len(subword.SPECIALS)] = False
    return {"vocab": vocab, "mcfg": mcfg, "src": src_corpus, "tgt": tgt_corpus,
            "eval": eval_corpus, "parallel": parallel, "heldout": heldout,
            "src_ids": np.nonzero(present)[0], "paths": p}


def _stage_synth(cfg, out, seed):
    pair, mono = generate_synthetic(cfg, seed)
    p = _paths(out)
    os.makedirs(os.path.dirname(p["src_mono"]), exist_ok=True)
    n = cfg["synth.sentences"]
    _write(p["src_mono"], mono["src"])
    _write(p["tgt_mono"], mono["tgt"])
    _write(p["eval_tgt"], mono["eval"])
    _write(p["parallel"], "".join(
        f"{s}\t{t}\n" for s, t in zip(pair.src_lines[:n], pair.tgt_lines[:n])))
    _write(p["heldout"], "".join(
        f"{s}\t{t}\n" for s, t in zip(pair.src_lines[n:], pair.tgt_lines[n:])))
    _write(p["dict"], "".join(f"{s}\t{t}\n" for s, t in pair.dictionary))


def _stage_tokenizer(cfg, out, seed):
    p = _paths(out)
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        flat = os.path.join(tmp, "parallel_flat.txt")
        _write(flat, open(p["parallel"], encoding="utf-8").read().replace("\t", "\n"))
        vocab = train_wordpiece([p["src_mono"], p["tgt_mono"], flat],
                                cfg["vocab.size"], cfg["vocab.alphabet"],
                                seed=stage_seed(seed, "vocab"))
    vocab.save(p["vocab"])


def _stage_skipgram(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    sentences = w["src"].sentences + w["tgt"].sentences \
        + [s for s, _ in w["parallel"].pairs] + [t for _, t in w["parallel"].pairs]
    space = train_skipgram(sentences, len(w["vocab"]), w["mcfg"].d_model,
                           window=cfg["skipgram.window"],
                           negatives=cfg["skipgram.negatives"],
                           epochs=cfg["skipgram.epochs"], lr=cfg["skipgram.lr"],
                           seed=stage_seed(seed, "skipgram"), vocab=w["vocab"])
    space.save_text(w["paths"]["vspace"])


def _stage_donor(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    stack = TransformerStack.build(w["mcfg"], stage_seed(seed, "donor.init"))
    pcfg = phase_config(cfg, "donor")
    state = TrainState(seed=stage_seed(seed, "donor.train"))
    stack, state = pretrain_mlm(stack, w["src"], pcfg, state=state, lang_id=SRC_LANG)
    save_stack(w["paths"]["donor"], stack, meta={"phase": "donor"})


def _stage_embalign(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    donor, _ = load_stack(w["paths"]["donor"])
    v_space = EmbeddingSpace.load_text(w["paths"]["vspace"], vocab=w["vocab"])
    u_space = EmbeddingSpace(donor.params["emb.wrd"].data[w["src_ids"]])
    v_sub = EmbeddingSpace(v_space.vectors[w["src_ids"]])
    acfg = AlignConfig(steps=cfg["align.steps"], batch=cfg["align.batch"],
                       lr_d=cfg["align.lr_d"], lr_w=cfg["align.lr_w"],
                       smoothing=cfg["align.smoothing"],
                       seed=stage_seed(seed, "embalign"))
    mapping, log = adversarial_align(u_space, v_sub, acfg)
    if cfg["align.refine_rounds"] > 0:
        mapping = procrustes_refine(mapping, u_space, v_sub,
                                    rounds=cfg["align.refine_rounds"])
    save_checkpoint(w["paths"]["embalign"], {"embalign.W": mapping.w},
                    {"log": log[-3:], "orthogonality_gap": mapping.orthogonality_gap()})


def _stage_aligner(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    pairs = w["parallel"].pairs
    fwd_table = train_ibm1(pairs, cfg["ibm1.iterations"])
    rev_table = train_ibm1([(t, s) for s, t in pairs], cfg["ibm1.iterations"])
    mode = cfg["align.mode"]
    fwd = [align_pair(s, t, fwd_table, rev_table, mode=mode) for s, t in pairs]
    rev = [align_pair(t, s, rev_table, fwd_table, mode=mode) for s, t in pairs]
    save_pharaoh(fwd, w["paths"]["align_fwd"])
    save_pharaoh(rev, w["paths"]["align_rev"])


def _load_alignments(w):
    from lmbridge.wordalign import load_pharaoh
    pairs = w["parallel"].pairs
    fwd = load_pharaoh(w["paths"]["align_fwd"],
                       [len(t) for _, t in pairs], [len(s) for s, _ in pairs])
    rev = load_pharaoh(w["paths"]["align_rev"],
                       [len(s) for s, _ in pairs], [len(t) for _, t in pairs])
    return fwd, rev


def _stage_phase1(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    donor, _ = load_stack(w["paths"]["donor"])
    tensors, _ = load_checkpoint(w["paths"]["embalign"])
    mapping = LinearMap(tensors["embalign.W"].astype(np.float64))
    v_space = EmbeddingSpace.load_text(w["paths"]["vspace"], vocab=w["vocab"])
    aligned = mapping.apply(v_space.normalize().vectors)
    stack = stack_from_donor(donor, aligned, seed)
    p1 = phase_config(cfg, "phase1")
    state = TrainState(seed=stage_seed(seed, "phase1"))
    stack, state = phase1_commonality(stack, w["src"], w["tgt"], p1, aligned, state=state)
    save_stack(w["paths"]["phase1"], stack,
               meta={"phase": "commonality", "train_state": state.to_meta()})
    _write_metrics(out, "phase1", state.metrics)


def _stage_phase2(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    stack, _ = load_stack(w["paths"]["phase1"])
    fwd, rev = _load_alignments(w)
    p2 = phase_config(cfg, "phase2")
    state = TrainState(seed=stage_seed(seed, "phase2"))
    a, b, combined, state, skipped = phase2_transfer(stack, w["parallel"],
                                                     fwd, rev, p2, state=state)
    save_stack(w["paths"]["phase2_a"], a, meta={"phase": "transfer.0to1"})
    save_stack(w["paths"]["phase2_b"], b, meta={"phase": "transfer.1to0"})
    save_stack(w["paths"]["phase2"], combined,
               meta={"phase": "transfer.combined", "skipped_pairs": skipped})
    _write_metrics(out, "phase2", state.metrics)


def _stage_phase3(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    stack, _ = load_stack(w["paths"]["phase2"])
    p3 = phase_config(cfg, "phase3")
    state = TrainState(seed=stage_seed(seed, "phase3"))
    final, state = phase3_language_specific(stack, w["tgt"], p3, state=state,
                                            lang_id=TGT_LANG)
    save_stack(w["paths"]["final"], final,
               meta={"phase": "specific", "train_state": state.to_meta()})
    _write_metrics(out, "phase3", state.metrics)


def _stage_eval(cfg, out, seed):
    w = _load_vocab_world(cfg, out)
    final, _ = load_stack(w["paths"]["final"])
    phase2, _ = load_stack(w["paths"]["phase2"])
    # Generation runs on the directional src->tgt model: its lower half
    # reads the source language and its upper half predicts the target.
    model_a, _ = load_stack(w["paths"]["phase2_a"])
    dictionary = [tuple(line.split("\t"))
                  for line in open(w["paths"]["dict"], encoding="utf-8").read().splitlines()]
    dmap = dictionary_id_map(dictionary, w["vocab"])
    results = {
        "bpw.phase2": bpw(phase2, w["eval"], cfg["eval.mask_seed"], lang_id=TGT_LANG,
                          batch_size=cfg["eval.batch"], mask_rate=cfg["train.mask_rate"]),
        "bpw.final": bpw(final, w["eval"], cfg["eval.mask_seed"], lang_id=TGT_LANG,
                         batch_size=cfg["eval.batch"], mask_rate=cfg["train.mask_rate"]),
        "translation.src2tgt": evaluate_translation(model_a, w["heldout"], dmap,
                                                    w["vocab"], cfg["eval.max_pairs"]),
    }
    blob = json.dumps(results, indent=2, sort_keys=True)
    from lmbridge.checkpoint import atomic_write
    atomic_write(w["paths"]["eval"], blob.encode("utf-8"))


def _write_metrics(out, phase, rows):
    from lmbridge.checkpoint import atomic_write
    path = os.path.join(out, f"metrics.{phase}.csv")
    atomic_write(path, metrics_to_csv(rows).encode("utf-8"))


STAGES = [
    # name, config prefixes that affect it, inputs, outputs, fn
    ("synth", ("synth.",), (), ("src_mono", "tgt_mono", "eval_tgt",
                                "parallel", "heldout", "dict"), _stage_synth),
    ("tokenizer", ("vocab.",), ("src_mono", "tgt_mono", "parallel"),
     ("vocab",), _stage_tokenizer),
    ("skipgram", ("skipgram.", "model."), ("vocab", "src_mono", "tgt_mono", "parallel"),
     ("vspace",), _stage_skipgram),
    ("donor", ("donor.", "model.", "train."), ("vocab", "src_mono"),
     ("donor",), _stage_donor),
    ("embalign", ("align.",), ("vocab", "vspace", "donor", "src_mono"),
     ("embalign",), _stage_embalign),
    ("aligner", ("ibm1.", "align.mode"), ("vocab", "parallel"),
     ("align_fwd", "align_rev"), _stage_aligner),
    ("phase1", ("phase1.", "model.", "train."),
     ("vocab", "donor", "embalign", "vspace", "src_mono", "tgt_mono"),
     ("phase1",), _stage_phase1),
    ("phase2", ("phase2.", "model.", "train."),
     ("vocab", "phase1", "parallel", "align_fwd", "align_rev"),
     ("phase2_a", "phase2_b", "phase2"), _stage_phase2),
    ("phase3", ("phase3.", "model.", "train."), ("vocab", "phase2", "tgt_mono"),
     ("final",), _stage_phase3),
    ("eval", ("eval.",), ("vocab", "final", "phase2", "eval_tgt", "heldout", "dict"),
     ("eval",), _stage_eval),
]


def _stage_key(cfg, seed, prefixes, input_paths):
    slice_cfg = {k: v for k, v in cfg.to_dict().items()
                 if any(k.startswith(p) or k == p for p in prefixes)}
    payload = {"seed": seed, "config": slice_cfg,
               "inputs": {p: file_hash(p) for p in input_paths}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def run_pipeline(cfg, out, seed=None, force=(), log=print):
    """Run every stage, skipping those whose inputs, config and outputs are
    unchanged since the recorded run.  Returns the list of executed stages."""
    seed = cfg["seed"] if seed is None else seed
    os.makedirs(out, exist_ok=True)
    meta_dir = os.path.join(out, "meta")
    os.makedirs(meta_dir, exist_ok=True)
    paths = _paths(out)
    executed = []
    for name, prefixes, inputs, outputs, fn in STAGES:
        in_paths = [paths[i] for i in inputs]
        out_paths = [paths[o] for o in outputs]
        meta_path = os.path.join(meta_dir, f"{name}.json")
        key = _stage_key(cfg, seed, prefixes, in_paths)
        cached = (all(os.path.exists(p) for p in out_paths)
                  and os.path.exists(meta_path)
                  and json.loads(open(meta_path).read()).get("key") == key
                  and name not in force)
        if cached:
            log(f"[{name}] cached")
            continue
        log(f"[{name}] running")
        fn(cfg, out, seed)
        record = {"key": key, "stage": name,
                  "inputs": {p: file_hash(p) for p in in_paths},
                  "outputs": {p: file_hash(p) for p in out_paths},
                  "config": {k: v for k, v in cfg.to_dict().items()
                             if any(k.startswith(pp) or k == pp for pp in prefixes)},
                  "seed": seed}
        from lmbridge.checkpoint import atomic_write
        atomic_write(meta_path, json.dumps(record, indent=2, sort_keys=True).encode())
        executed.append(name)
    return executed
