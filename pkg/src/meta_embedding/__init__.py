"""Locally linear meta-embeddings - combine pre-trained word vectors by neighbourhood reconstruction."""

__version__ = "1.0.0"
