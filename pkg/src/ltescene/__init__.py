"""Label-tree embeddings and a temporal CNN for acoustic scene classification."""

__version__ = "0.1.0"
