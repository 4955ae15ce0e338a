"""Input-adaptive sparsification of ReLU feedforward blocks.

Static indicator-based sparsification (SIBS), micro-gated sparsification (MGS),
activation-sparsity profiling and exact MAC accounting on a small frozen
residual MLP stack trained on synthetic data.
"""

__version__ = "0.1.0"
