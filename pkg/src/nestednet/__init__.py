"""Nested sparse neural networks.

One stored parameter set containing multiple runnable sub-networks at
different sparsity levels, trained jointly, with level-selective
inference, standalone sub-network extraction, and consensus prediction.
"""

__version__ = "0.1.0"
