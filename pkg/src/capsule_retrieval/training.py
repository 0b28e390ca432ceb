"""Triplet objective, hard negative mining and the optimization loop.

The objective is the batch mean of ``max(0, d(a, p) - d(a, n) + margin)``
over Euclidean distances between masked capsule embeddings.  Anchors and
positives are two views of the same item; the negative is the embedding-space
nearest image of a *different* category ("hard" negative).  Every possible
(anchor, positive) ordered pair of the train split is visited once per epoch.

Mining runs against a cached bank of train-split embeddings computed in eval
mode with argmax masking (matching what retrieval sees); the cache refreshes
each epoch by default, or every ``refresh_interval`` optimizer steps.  The
loss itself embeds with ground-truth label masking.

Everything is deterministic for a fixed ``TrainConfig.seed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from capsule_retrieval import capsules as caps
from capsule_retrieval import tensor as T
from capsule_retrieval.backbones import Network
from capsule_retrieval.tensor import ShapeError, Tensor

__all__ = [
    "TrainConfig",
    "TripletBatch",
    "TrainLog",
    "TrainingError",
    "MiningError",
    "triplet_loss",
    "mine_hard_negative",
    "enumerate_positives",
    "SGD",
    "Adam",
    "make_optimizer",
    "embedding_bank",
    "train",
]


class TrainingError(RuntimeError):
    """Training aborted; carries the failing optimizer step when relevant."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MiningError(ValueError):
    """No eligible hard negative exists."""


@dataclass
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    refresh_interval: int | None = None  # None: refresh the mining cache per epoch

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TripletBatch:
    """Index triples resolved against a dataset manifest."""

    anchor_ids: list[str]
    positive_ids: list[str]
    negative_ids: list[str]

    def __len__(self) -> int:
        return len(self.anchor_ids)


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Mean hinge over the batch: max(0, d(a,p) - d(a,n) + margin), d Euclidean."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ShapeError(
            f"triplet_loss: embedding shapes differ: {anchor.shape}, "
            f"{positive.shape}, {negative.shape}"
        )
    if anchor.ndim != 2:
        raise ShapeError(f"triplet_loss expects [batch, dim] embeddings, got {anchor.shape}")
    d_pos = T.l2_norm(T.elementwise_sub(anchor, positive), axis=1)
    d_neg = T.l2_norm(T.elementwise_sub(anchor, negative), axis=1)
    hinge = T.relu(T.add_scalar(T.elementwise_sub(d_pos, d_neg), margin))
    return T.mul_scalar(T.reduce_sum(hinge), 1.0 / anchor.shape[0])


def mine_hard_negative(
    anchor_embedding: np.ndarray,
    candidate_embeddings: np.ndarray,
    candidate_categories,
    anchor_category,
) -> int:
    """Index of the nearest different-category candidate; ties go to the
    smallest index."""
    cands = np.asarray(candidate_embeddings)
    cats = np.asarray(candidate_categories)
    eligible = cats != anchor_category
    if not eligible.any():
        raise MiningError(
            "no candidate of a different category: the dataset must contain "
            "at least 2 categories"
        )
    dists = np.sqrt(((cands - np.asarray(anchor_embedding)) ** 2).sum(axis=1))
    dists[~eligible] = np.inf
    return int(np.argmin(dists))


def enumerate_positives(anchor_id: str, records) -> list[str]:
    """All other image ids sharing the anchor's item identity, sorted by id."""
    by_id = {r.image_id: r for r in records}
    if anchor_id not in by_id:
        raise KeyError(f"anchor {anchor_id!r} not found among {len(records)} records")
    item = by_id[anchor_id].item_id
    return sorted(r.image_id for r in records if r.item_id == item and r.image_id != anchor_id)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    """Plain gradient descent: p <- p - lr * grad."""

    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params.values():
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def state_meta(self) -> dict:
        return {"type": "sgd", "lr": self.lr}

    def load_state(self, meta: dict, tensors: dict[str, np.ndarray]) -> None:
        self.lr = float(meta["lr"])


class Adam:
    """Adam with bias correction (no weight decay)."""

    kind = "adam"

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def state_meta(self) -> dict:
        return {
            "type": "adam",
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
        }

    def load_state(self, meta: dict, tensors: dict[str, np.ndarray]) -> None:
        self.lr = float(meta["lr"])
        self.beta1 = float(meta["beta1"])
        self.beta2 = float(meta["beta2"])
        self.eps = float(meta["eps"])
        self.t = int(meta["t"])
        for k in self.params:
            self.m[k] = tensors[f"m.{k}"].copy()
            self.v[k] = tensors[f"v.{k}"].copy()


def make_optimizer(net: Network, cfg: TrainConfig):
    params = net.named_parameters()
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def embedding_bank(net: Network, dataset, image_ids, batch_size: int = 16) -> np.ndarray:
    """Eval-mode, argmax-masked embeddings for the given ids, row per id."""
    rows = []
    for start in range(0, len(image_ids), batch_size):
        chunk = image_ids[start : start + batch_size]
        images = Tensor(dataset.batch(chunk))
        rows.append(net.embed_images(images, labels=None, training=False).data)
    return np.concatenate(rows, axis=0)


def _training_pairs(train_records) -> list[tuple[str, str]]:
    pairs = []
    for r in sorted(train_records, key=lambda r: r.image_id):
        for pos in enumerate_positives(r.image_id, train_records):
            pairs.append((r.image_id, pos))
    return pairs


def train(net: Network, dataset, cfg: TrainConfig) -> TrainLog:
    """Optimize ``net`` on the dataset's train split; returns the loss log.

    Raises ``TrainingError`` (with the step index) if the loss turns
    non-finite, and ``MiningError``/``ValueError`` for datasets that cannot
    form triplets.
    """
    cfg.validate()
    train_records = dataset.split("train")
    if len({r.category_id for r in train_records}) < 2:
        raise MiningError("training requires at least 2 categories in the train split")
    pairs = _training_pairs(train_records)
    if not pairs:
        raise ValueError("training requires at least one item with 2+ train views")

    categories = dataset.categories
    cat_of = {r.image_id: categories.index(r.category_id) for r in dataset.records}
    train_ids = [r.image_id for r in sorted(train_records, key=lambda r: r.image_id)]
    train_cats = np.array([cat_of[i] for i in train_ids])
    row_of = {image_id: k for k, image_id in enumerate(train_ids)}

    optimizer = make_optimizer(net, cfg)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    bank = None
    step = 0

    for _epoch in range(cfg.epochs):
        if cfg.refresh_interval is None:
            bank = embedding_bank(net, dataset, train_ids)
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.refresh_interval is not None and step % cfg.refresh_interval == 0:
                bank = embedding_bank(net, dataset, train_ids)
            batch_pairs = [pairs[k] for k in order[start : start + cfg.batch_size]]
            anchors = [a for a, _ in batch_pairs]
            positives = [p for _, p in batch_pairs]
            negatives = []
            for a in anchors:
                idx = mine_hard_negative(
                    bank[row_of[a]], bank, train_cats, cat_of[a]
                )
                negatives.append(train_ids[idx])

            triplet = TripletBatch(anchors, positives, negatives)
            ids = triplet.anchor_ids + triplet.positive_ids + triplet.negative_ids
            labels = [cat_of[i] for i in ids]
            images = Tensor(dataset.batch(ids))
            n = len(triplet)
            try:
                class_caps = net.forward(images, training=True)
                emb = caps.embed(class_caps, labels=labels)
                loss = triplet_loss(
                    T.narrow(emb, 0, 0, n),
                    T.narrow(emb, 0, n, n),
                    T.narrow(emb, 0, 2 * n, n),
                    cfg.margin,
                )
            except T.NumericsError as exc:
                raise TrainingError(f"non-finite loss at step {step}: {exc}", step) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}", step)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step()
            log.step_losses.append(value)
            epoch_losses.append(value)
            step += 1
        log.epoch_losses.append(float(np.mean(epoch_losses)))
    return log
