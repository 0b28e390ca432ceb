"""Capsule primitives: squashing, primary capsule formation, routing, embedding.

A capsule is a vector of neurons whose direction carries the pose of an
instance and whose norm carries its existence probability.  Class capsules
are produced from primary capsules by agreement routing: each lower capsule
casts a vote per class (a learned linear map of its pose), coupling
coefficients are softmax-normalized per lower capsule, and over the routing
iterations the coefficients shift toward the classes whose squashed outputs
agree with the votes.

Embeddings are the L2-normalized class capsule poses with every capsule but
one masked to zero, flattened to a single vector of length
``num_classes * capsule_dim``.  The kept capsule is either the known class
(training) or the one with the largest activation (retrieval time, when
labels are unavailable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capsule_retrieval import tensor as T
from capsule_retrieval.tensor import ShapeError, Tensor, make_op

__all__ = [
    "CapsuleTensor",
    "ClassCapsuleParams",
    "squash",
    "primary_capsules",
    "compute_votes",
    "dynamic_routing",
    "embed",
    "unit_poses",
]

_SQUASH_EPS = 1e-12


@dataclass
class CapsuleTensor:
    """A batch of capsule sets: poses with shape [batch, capsules, dim].

    The activation of a capsule is the L2 norm of its pose.
    """

    poses: Tensor

    def __post_init__(self):
        if self.poses.ndim != 3:
            raise ShapeError(
                f"capsule poses must be [batch, capsules, dim], got {self.poses.shape}"
            )

    @property
    def batch(self) -> int:
        return self.poses.shape[0]

    @property
    def count(self) -> int:
        return self.poses.shape[1]

    @property
    def dim(self) -> int:
        return self.poses.shape[2]

    def activations(self) -> np.ndarray:
        """Capsule norms as a plain [batch, capsules] array (not differentiable)."""
        return np.linalg.norm(self.poses.data, axis=2)


@dataclass
class ClassCapsuleParams:
    """Per-(input, output) capsule transformation matrices W[in, out, d_in, d_out]."""

    weight: Tensor

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(
                f"class capsule weight must be [in, out, d_in, d_out], got {self.weight.shape}"
            )

    @classmethod
    def initialize(
        cls, in_caps: int, out_caps: int, in_dim: int, out_dim: int, rng: np.random.Generator
    ) -> "ClassCapsuleParams":
        scale = np.sqrt(2.0 / (in_dim + out_dim))
        w = rng.normal(scale=scale, size=(in_caps, out_caps, in_dim, out_dim))
        return cls(Tensor(w.astype(T.default_dtype()), requires_grad=True))


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Shrink vectors to norm |s|^2 / (1 + |s|^2) without changing direction.

    The zero vector maps to zero with exactly zero gradient; a small eps
    inside the norm keeps the division finite.
    """
    axis = axis % s.ndim
    x = s.data
    sq = (x * x).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq + _SQUASH_EPS)
    factor = sq / ((1.0 + sq) * norm)
    out = x * factor

    def grad_fn(g):
        dot = (x * g).sum(axis=axis, keepdims=True)
        # d factor / d sq, written so the sq -> 0 limit stays finite
        dfactor = 1.0 / ((1.0 + sq) * norm) - factor / (1.0 + sq) - factor / (
            2.0 * (sq + _SQUASH_EPS)
        )
        return (g * factor + 2.0 * x * dot * dfactor,)

    return make_op(out, (s,), grad_fn, "squash")


def unit_poses(t: Tensor, axis: int = -1) -> Tensor:
    """Divide each vector along ``axis`` by its L2 norm; zero vectors stay zero."""
    axis = axis % t.ndim
    x = t.data
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    y = x / safe
    zero = n == 0

    def grad_fn(g):
        dot = (y * g).sum(axis=axis, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(zero, 0.0, gx),)

    return make_op(y, (t,), grad_fn, "unit_poses")


def primary_capsules(features: Tensor, channels: int = 32, dim: int = 16) -> CapsuleTensor:
    """Group projection-conv features into squashed capsules.

    ``features`` must be [N, channels*dim, H, W]; each capsule takes ``dim``
    consecutive feature channels at one spatial position, giving
    channels*H*W capsules of size dim.
    """
    if features.ndim != 4:
        raise ShapeError(f"primary_capsules expects [N, C, H, W], got {features.shape}")
    n, c, h, w = features.shape
    if c != channels * dim:
        raise ShapeError(
            f"primary_capsules: {c} feature channels cannot form "
            f"{channels} channels of {dim}-d capsules (need {channels * dim})"
        )
    grouped = T.reshape(features, (n, channels, dim, h, w))
    ordered = T.transpose(grouped, (0, 1, 3, 4, 2))  # [N, channels, H, W, dim]
    flat = T.reshape(ordered, (n, channels * h * w, dim))
    return CapsuleTensor(squash(flat))


def compute_votes(primary: CapsuleTensor, params: ClassCapsuleParams) -> Tensor:
    """Votes u_hat[b, i, j] = primary_pose[b, i] @ W[i, j]; shape [B, in, out, out_dim]."""
    poses = primary.poses
    w = params.weight
    if poses.shape[1] != w.shape[0] or poses.shape[2] != w.shape[2]:
        raise ShapeError(
            f"compute_votes: poses {poses.shape} incompatible with weight {w.shape}"
        )
    return T.einsum2("bid,ijde->bije", poses, w)


def dynamic_routing(votes: Tensor, iterations: int = 3) -> CapsuleTensor:
    """Agreement routing over votes [batch, in_caps, out_caps, dim].

    Per iteration: couplings = softmax of the logits over the out axis,
    weighted vote sums are squashed into candidate outputs, and the logits
    grow by the vote/output dot products.  Logits start at zero and only the
    final squashed outputs are returned; gradients flow through every
    iteration.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least 1 iteration, got {iterations}")
    if votes.ndim != 4:
        raise ShapeError(f"votes must be [batch, in, out, dim], got {votes.shape}")
    b, in_caps, out_caps, _ = votes.shape
    logits = Tensor(np.zeros((b, in_caps, out_caps), dtype=votes.dtype))
    v = None
    for it in range(iterations):
        couplings = T.softmax(logits, axis=2)
        s = T.einsum2("bij,bijd->bjd", couplings, votes)
        v = squash(s)
        if it < iterations - 1:
            agreement = T.einsum2("bijd,bjd->bij", votes, v)
            logits = T.elementwise_add(logits, agreement)
    return CapsuleTensor(v)


def routing_couplings(votes_data: np.ndarray, iterations: int = 3) -> list[np.ndarray]:
    """Coupling coefficients per iteration (forward only, for inspection/tests)."""
    b, in_caps, out_caps, _ = votes_data.shape
    logits = np.zeros((b, in_caps, out_caps))
    history = []
    for it in range(iterations):
        e = np.exp(logits - logits.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True)
        history.append(c)
        s = np.einsum("bij,bijd->bjd", c, votes_data)
        sq = (s * s).sum(axis=-1, keepdims=True)
        v = s * (sq / ((1.0 + sq) * np.sqrt(sq + _SQUASH_EPS)))
        if it < iterations - 1:
            logits = logits + np.einsum("bijd,bjd->bij", votes_data, v)
    return history


def embed(class_caps: CapsuleTensor, labels=None) -> Tensor:
    """Masked, L2-normalized flat embedding of shape [batch, caps*dim].

    Every capsule pose is divided by its norm, then all capsules except the
    selected one are zeroed and the result is flattened.  ``labels`` selects
    per-sample capsules (training, known class); ``labels=None`` selects the
    capsule with the largest pre-normalization activation (retrieval).
    """
    poses = class_caps.poses
    batch, caps, dim = poses.shape
    if labels is None:
        selected = class_caps.activations().argmax(axis=1)
    else:
        selected = np.asarray(labels, dtype=np.int64)
        if selected.shape != (batch,):
            raise ShapeError(
                f"embed: labels must have shape ({batch},), got {selected.shape}"
            )
        if ((selected < 0) | (selected >= caps)).any():
            bad = selected[(selected < 0) | (selected >= caps)][0]
            raise ValueError(f"embed: label {bad} outside [0, {caps})")
    mask = np.zeros((batch, caps, dim), dtype=poses.dtype)
    mask[np.arange(batch), selected, :] = 1.0
    masked = T.elementwise_mul(unit_poses(poses, axis=2), Tensor(mask, dtype=poses.dtype))
    return T.reshape(masked, (batch, caps * dim))
