"""Character-grid visual story generation: data, model, decoding and evaluation steps."""

__version__ = "0.1.0"
