"""Episode-level stylometric embeddings for forum authorship attribution."""

__version__ = "0.1.0"
