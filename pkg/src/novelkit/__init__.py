"""Novel category discovery on embedding vectors."""

__version__ = "0.1.0"
