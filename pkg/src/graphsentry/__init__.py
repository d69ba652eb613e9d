"""graphsentry: a robustness-oriented classifier for call-graph data.

The package trains a graph classifier that couples masked-node feature
reconstruction with a proxy-based contrastive objective, and ships an
attack harness that probes trained models with gradient-guided edge
insertions (white box) and surrogate-distillation transfer (black box).
"""

__version__ = "0.1.0"
