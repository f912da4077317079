"""
clinical_lm: desk-scale clinical language model pipeline.

Corpus cleaning and de-identification, BPE vocabulary, encoder pretraining
(MLM + sentence order), tensor/data parallel training and task heads live in
subpackages; the command-line entry point is clinical_lm.cli.
"""

__version__ = "0.1.0"
