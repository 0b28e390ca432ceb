"""Triplet capsule networks for in-shop image retrieval, from scratch on NumPy.

Subpackages map onto the pipeline stages: ``tensor`` (autodiff core),
``capsules`` (squash / routing / masked embeddings), ``backbones`` (SC and RC
feature blocks and network assembly), ``training`` (triplet objective, hard
negative mining, optimizers, checkpoints), ``retrieval`` (exhaustive
Euclidean gallery index and Recall@K), ``data`` (manifests, pixmap IO,
synthetic dataset generator) and ``cli``.
"""

from capsule_retrieval.tensor import Tensor, backward

__all__ = ["Tensor", "backward"]
__version__ = "0.1.0"
