"""Desk-scale cross-lingual transfer of masked language models.

The pipeline: train a joint subword vocabulary, train static skipgram
embeddings, align them onto a donor model's raw embedding space, extract
word alignments from parallel text, then run the three-phase transfer
(commonality, directional transfer with the pivot layer, language-specific
polish) and evaluate with bits-per-word and BLEU.
"""

__version__ = "0.1.0"
