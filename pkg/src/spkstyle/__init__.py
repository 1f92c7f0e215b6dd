"""Hierarchical disentanglement of speech features into content, speaker,
and style embeddings, with a synthetic factorized corpus for desk-scale
verification."""

__version__ = "0.1.0"
