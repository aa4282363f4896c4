"""Flat key=value run configuration.

One documented key set covers every stage; unknown keys are rejected.
Resolution order is defaults < config file < command-line overrides, and
the fully resolved mapping is echoed into each run's metadata file.
"""

from __future__ import annotations

from pathlib import Path


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default, help)
KNOWN_KEYS = {
    "seed": (int, 0, "root seed; every stage derives from it"),
    "threads": (int, 1, "worker count for batch producers (compute is fixed-order)"),

    "synth.src_vocab": (int, 100, "surface words per language (bijective dictionary)"),
    "synth.particles": (int, 4, "target-only particle types"),
    "synth.sentences": (int, 20000, "parallel training pairs to generate"),
    "synth.heldout": (int, 500, "held-out parallel pairs for translation eval"),
    "synth.len_lo": (int, 4, "min content words per sentence"),
    "synth.len_hi": (int, 9, "max content words per sentence"),
    "synth.rule": (str, "reverse", "reorder rule: reverse | swap-adjacent | rotate-<k>"),
    "synth.particle_prob": (float, 0.1, "insertion probability per target slot"),
    "synth.topics": (int, 8, "topic blocks (documents share one)"),
    "synth.mono_docs": (int, 1500, "documents per monolingual corpus"),
    "synth.mono_sents": (int, 8, "sentences per document"),
    "synth.eval_docs": (int, 150, "held-out target documents for BPW"),

    "vocab.size": (int, 800, "joint subword vocabulary budget"),
    "vocab.alphabet": (int, 64, "retained alphabet size"),

    "skipgram.window": (int, 5, "context window"),
    "skipgram.negatives": (int, 5, "negative samples per pair"),
    "skipgram.epochs": (int, 5, "passes over the corpus"),
    "skipgram.lr": (float, 0.025, "initial learning rate"),

    "model.n_layers": (int, 4, "encoder layers (even; the pivot adds one)"),
    "model.d_model": (int, 64, "hidden size (also the static embedding dim)"),
    "model.n_heads": (int, 4, "attention heads"),
    "model.d_ff": (int, 256, "feed-forward size"),
    "model.t_max": (int, 24, "maximum sequence length"),
    "model.dropout": (float, 0.1, "dropout rate in train mode"),

    "donor.steps": (int, 600, "MLM pretraining steps for the desk-scale donor"),
    "donor.batch": (int, 32, "donor batch size"),
    "donor.lr": (float, 3e-4, "donor peak learning rate"),

    "align.steps": (int, 8000, "adversarial steps"),
    "align.batch": (int, 128, "adversarial batch size"),
    "align.lr_d": (float, 1e-4, "discriminator Adam learning rate"),
    "align.lr_w": (float, 0.1, "mapping SGD learning rate"),
    "align.smoothing": (float, 0.1, "discriminator label smoothing"),
    "align.refine_rounds": (int, 10, "iterative refinement rounds"),

    "ibm1.iterations": (int, 8, "EM iterations per direction"),
    "align.mode": (str, "grow-diag", "symmetrization: grow-diag | intersect"),

    "phase1.steps": (int, 200, "commonality steps"),
    "phase1.batch": (int, 32, "commonality batch size"),
    "phase1.lr": (float, 3e-4, "commonality peak learning rate"),
    "phase2.steps": (int, 200, "transfer steps per directional model"),
    "phase2.batch": (int, 32, "transfer batch size"),
    "phase2.lr": (float, 3e-4, "transfer peak learning rate"),
    "phase2.use_cdlm": (_bool, True, "False gives the MLM+TLM-only arm"),
    "phase3.steps": (int, 800, "language-specific steps"),
    "phase3.batch": (int, 32, "language-specific batch size"),
    "phase3.lr": (float, 2e-4, "language-specific peak learning rate"),
    "phase3.use_nsp": (_bool, True, "train the next-sentence objective"),
    "train.warmup": (float, 0.1, "linear warmup fraction of steps"),
    "train.weight_decay": (float, 0.01, "decoupled weight decay"),
    "train.mask_rate": (float, 0.15, "masked-position rate"),
    "train.checkpoint_every": (int, 0, "steps between periodic checkpoints (0 = off)"),

    "eval.mask_seed": (int, 1234, "frozen evaluation mask seed"),
    "eval.batch": (int, 64, "evaluation batch size"),
    "eval.max_pairs": (int, 300, "held-out pairs scored for BLEU/accuracy"),
}


class RunConfig:
    """Resolved configuration: defaults, then file, then overrides."""

    def __init__(self, values=None):
        self.values = {k: spec[1] for k, spec in KNOWN_KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw):
        if key not in KNOWN_KEYS:
            raise KeyError(f"unknown configuration key {key!r}")
        parser = KNOWN_KEYS[key][0]
        self.values[key] = parser(raw) if isinstance(raw, str) else parser(raw)

    def get(self, key):
        if key not in KNOWN_KEYS:
            raise KeyError(f"unknown configuration key {key!r}")
        return self.values[key]

    def __getitem__(self, key):
        return self.get(key)

    def to_dict(self):
        return dict(self.values)

    @classmethod
    def load(cls, path, overrides=None):
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = stripped.partition("=")
            cfg.set(key.strip(), value.strip())
        for k, v in (overrides or {}).items():
            cfg.set(k, v)
        return cfg

    def save(self, path):
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def describe():
        out = []
        for key, (parser, default, help_text) in KNOWN_KEYS.items():
            out.append(f"{key} (default {default!r}): {help_text}")
        return "\n".join(out)
