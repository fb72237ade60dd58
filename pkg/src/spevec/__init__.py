"""Speaker embeddings with spatial pyramid encoding, LDE pooling and ring-loss
length normalization, implemented in NumPy with hand-written backward passes."""

__version__ = "0.1.0"
