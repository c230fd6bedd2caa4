"""Relation extraction over entity-pair matrices with masked-reconstruction training.

The package is organized by pipeline stage:

- :mod:`remir.corpus` -- data model, DocRED-format I/O, entity markers, and the
  synthetic compositional-relation corpus generator.
- :mod:`remir.encoder` -- a small trainable token encoder and the pipeline from
  token states to the entity-pair feature matrix.
- :mod:`remir.inference` -- cell masking and the four-mode inference attention
  stack that corrects the matrix.
- :mod:`remir.objective` -- classifier head, threshold-based decoding, the
  adaptive-threshold classification loss and the bidirectional-KL
  reconstruction loss.
- :mod:`remir.metrics` -- triple-level precision/recall/F1 report including the
  ignore-train, intra/inter and reasoning-subset variants.
- :mod:`remir.trainer` -- dual-path training loop, evaluation driver,
  checkpointing, and the finite-difference gradient checker.
- :mod:`remir.cli` -- command-line entry points (``remir gen/train/eval/ablate``).
"""

__version__ = "0.1.0"
