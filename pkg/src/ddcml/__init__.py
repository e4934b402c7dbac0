"""Volumetric autoencoder embeddings with deep metric learning.

Subpackages cover the full pipeline: volume I/O and synthetic phantoms
(:mod:`~ddcml.volio`), iterative intensity normalization
(:mod:`~ddcml.inorm`), the reverse-mode tensor engine (:mod:`~ddcml.ndgrad`),
the convolutional autoencoder (:mod:`~ddcml.cae`), training losses
(:mod:`~ddcml.loss`), cross-validated training (:mod:`~ddcml.train`),
evaluation metrics (:mod:`~ddcml.evalx`), embedding retrieval
(:mod:`~ddcml.retrieve`), and the command line (:mod:`~ddcml.cli`).
"""

__version__ = "0.1.0"
