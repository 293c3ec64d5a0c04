"""MeanSparse: post-training mean-centred feature sparsification for robust CNNs."""

__version__ = "0.1.0"
