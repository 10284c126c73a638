"""Hierarchical image-labeling engine.

A taxonomy of image classes where every parent node is an independent
classifier, an entropy-gated active-learning loop over labeled/unlabeled
pools, 2-D projections with neighborhood diagnostics, and spiral thumbnail
layouts, exposed through an HTTP API and a CLI.
"""

__version__ = "0.1.0"
