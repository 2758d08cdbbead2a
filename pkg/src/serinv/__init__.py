"""Speaker-invariant emotion embeddings: TDNN/BiLSTM/stats-pooling network, adversarial and cross-gradient training."""

__version__ = "0.1.0"
