"""Multi-scale self-supervised objective: contrastive + region-aware losses.

One training sample is an image plus a set of negatives. The image-scale
branch contrasts a query embedding against one positive key (a second
augmented view, embedded by a momentum-updated key encoder) and a queue of
negative keys. The region-scale branch predicts which of the five lobe
windows each crop came from, through the query encoder's shared feature
extractor and a dedicated 5-way head.

Per sample the loss is alpha1 * L_contrastive + alpha2 * (L_region + the
region losses of the sample's negative images); with queue-held negatives
the negative keys are bare vectors, so that set is empty and a batch
optimizes the mean of alpha1 * L_contrastive(j) + alpha2 * L_region(j).
``final_loss`` implements the general weighted form for callers that do
hold negative images.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Model, build_network
from .errors import (
    ContractError,
    DegenerateAnatomyError,
    DegenerateEmbeddingError,
    DimensionError,
    ModelPairingError,
)
from .nn import Linear
from .phantom import AugmentPolicy, augment, center_crop
from .regions import LOBES, generate_regions
from .tensor import Tensor, as_tensor, no_grad, sgd_step, zero_grads

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.07
DEFAULT_ENCODER_MOMENTUM = 0.999


# ---------------------------------------------------------------------
# batch types
# ---------------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    """Query vector, positive key, negative keys, and the temperature."""

    x_q: object
    x_k_pos: np.ndarray
    negatives: list[np.ndarray]
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        d = as_tensor(self.x_q).shape[-1]
        if as_tensor(self.x_k_pos).shape != (d,):
            raise DimensionError("positive key dimension mismatch")
        for k in self.negatives:
            if np.asarray(k).shape != (d,):
                raise DimensionError("negative key dimension mismatch")


@dataclass
class LossWeights:
    alpha1: float = 0.8
    alpha2: float = 0.8

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.alpha1 == 0 and self.alpha2 == 0:
            raise ContractError("at least one loss weight must be positive")


@dataclass
class RegionPrediction:
    """Five-way logits for one lobe crop and its one-hot target."""

    logits: object
    target: np.ndarray

    def target_index(self) -> int:
        t = np.asarray(self.target, dtype=np.float64)
        if t.shape != (5,) or not np.isclose(t.sum(), 1.0) or set(np.unique(t)) - {0.0, 1.0}:
            raise ContractError("target must be a one-hot vector over 5 classes")
        return int(np.argmax(t))


# ---------------------------------------------------------------------
# embedding utilities
# ---------------------------------------------------------------------


def l2_normalize(v):
    """Scale a vector (or each row of a matrix) to unit L2 norm."""
    t = as_tensor(v)
    if t.ndim == 1:
        sq = (t * t).sum()
        if sq.data < 1e-24:
            raise DegenerateEmbeddingError("cannot normalize a zero vector")
        return t * T.div(1.0, T.tsqrt(sq))
    if t.ndim == 2:
        sq = (t * t).sum(axis=1, keepdims=True)
        if (sq.data < 1e-24).any():
            raise DegenerateEmbeddingError("cannot normalize a zero row")
        return t * T.div(1.0, T.tsqrt(sq))
    raise DimensionError("l2_normalize expects a vector or matrix")


def contrastive_loss(batch: ContrastiveBatch, paper_literal_eq2: bool = False) -> Tensor:
    """Log-loss of the (n+1)-way softmax classifying the positive key.

    With ``paper_literal_eq2`` the temperature divides only the positive
    similarity, reproducing the printed form of the objective; the default
    applies it to every term.
    """
    q = as_tensor(batch.x_q)
    pos = T.matmul(q, Tensor(np.asarray(batch.x_k_pos, dtype=np.float64)))
    logits = [T.reshape(pos * (1.0 / batch.tau), (1,))]
    if batch.negatives:
        negs = T.matmul(Tensor(np.stack(batch.negatives).astype(np.float64)), q)
        if not paper_literal_eq2:
            negs = negs * (1.0 / batch.tau)
        logits.append(negs)
    return T.cross_entropy(T.concat(logits), 0)


# ---------------------------------------------------------------------
# encoder pair and key queue
# ---------------------------------------------------------------------


@dataclass
class EncoderPair:
    """Query encoder (gradient-trained) and its momentum-tracked key twin."""

    query: Model
    key: Model
    momentum: float = DEFAULT_ENCODER_MOMENTUM

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ContractError("encoder momentum must be in [0, 1]")
        _check_aligned(self.query, self.key)

    @staticmethod
    def create(query: Model, momentum: float = DEFAULT_ENCODER_MOMENTUM) -> "EncoderPair":
        """Key encoder starts as an exact copy of the query encoder."""
        key = build_network(query.config, seed=0)
        for name, p in key.manifest().items():
            p.data[...] = query.manifest()[name].data
        qbufs = query.buffers()
        for name, buf in key.buffers().items():
            buf[...] = qbufs[name]
        return EncoderPair(query=query, key=key, momentum=momentum)


def _check_aligned(query: Model, key: Model) -> None:
    qm, km = query.manifest(), key.manifest()
    if list(qm) != list(km):
        raise ModelPairingError("encoder parameter manifests differ")
    for name in qm:
        if qm[name].shape != km[name].shape:
            raise ModelPairingError(f"parameter {name} has mismatched shapes")


def momentum_update(pair: EncoderPair) -> Model:
    """theta_k <- m*theta_k + (1-m)*theta_q, elementwise; returns the key."""
    _check_aligned(pair.query, pair.key)
    m = pair.momentum
    qm = pair.query.manifest()
    for name, pk in pair.key.manifest().items():
        pk.data *= m
        pk.data += (1.0 - m) * qm[name].data
    return pair.key


class NegativeQueue:
    """Fixed-capacity FIFO of key vectors; eviction is strictly oldest-first."""

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._items: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._items)

    def enqueue(self, keys) -> None:
        arr = np.asarray(keys, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise DimensionError("keys must be a vector or a stack of vectors")
        if self.dim is None:
            self.dim = arr.shape[1]
        if arr.shape[1] != self.dim:
            raise DimensionError(
                f"key dimension {arr.shape[1]} != queue dimension {self.dim}")
        for row in arr:
            self._items.append(row.copy())
            if len(self._items) > self.capacity:
                self._items.popleft()

    def as_matrix(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, self.dim or 0))
        return np.stack(list(self._items))

    def prefill_random(self, dim: int, rng: np.random.Generator) -> None:
        """Fill to capacity with random unit vectors (step-zero negatives)."""
        self.dim = self.dim or dim
        vecs = rng.normal(size=(self.capacity, dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        self.enqueue(vecs)


def prefill_with_keys(queue: NegativeQueue, key_encoder: Model, images,
                      policy: AugmentPolicy, batch_size: int = 32) -> None:
    """Seed the queue with key-encoder embeddings of the given images.

    Starting from real keys means the first optimizer steps already face
    negatives from the actual data distribution rather than random
    directions; without this the contrastive term hardens mechanically as
    real keys displace the random fill, regardless of learning progress.
    """
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            crops = np.stack([center_crop(img, policy) for img in chunk])[..., None]
            feats = key_encoder.forward_features(Tensor(crops), training=True)
            queue.enqueue(l2_normalize(feats).data)


def enqueue_negatives(queue: NegativeQueue, keys) -> NegativeQueue:
    queue.enqueue(keys)
    return queue


# ---------------------------------------------------------------------
# region-aware loss
# ---------------------------------------------------------------------


def region_aware_loss(predictions) -> Tensor:
    """Sum of the five per-lobe cross entropies for one image."""
    preds = list(predictions)
    if len(preds) != 5:
        raise ContractError(f"exactly five region predictions required, got {len(preds)}")
    indices = [p.target_index() for p in preds]
    if sorted(indices) != [0, 1, 2, 3, 4]:
        raise ContractError("targets must cover all five lobe classes exactly once")
    total = None
    for p, idx in zip(preds, indices):
        term = T.cross_entropy(as_tensor(p.logits), idx)
        total = term if total is None else total + term
    return total


def final_loss(l_cons, l_ra_query, l_ra_negs, weights: LossWeights) -> Tensor:
    """alpha1 * contrastive + alpha2 * (query regions + negative regions)."""
    region = as_tensor(l_ra_query)
    for term in l_ra_negs:
        region = region + as_tensor(term)
    return as_tensor(l_cons) * weights.alpha1 + region * weights.alpha2


# ---------------------------------------------------------------------
# the training step
# ---------------------------------------------------------------------


@dataclass
class SslTask:
    """State for one self-supervised pretraining run."""

    pair: EncoderPair
    queue: NegativeQueue
    region_head: Linear
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = DEFAULT_TAU
    paper_literal_eq2: bool = False
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4

    def trainable_parameters(self):
        return self.pair.query.parameters() + self.region_head.parameters()


def _augmented_batch(task: SslTask, images, rng) -> tuple[np.ndarray, np.ndarray,
                                                           np.ndarray | None, int]:
    """Two views per surviving image plus its five augmented lobe crops."""
    need_regions = task.weights.alpha2 > 0
    views_q, views_k, region_imgs = [], [], []
    skipped = 0
    for img in images:
        crops = None
        if need_regions:
            try:
                rs = generate_regions(img)
                crops = [rs.regions[lobe] for lobe in LOBES]
            except DegenerateAnatomyError as exc:
                skipped += 1
                logger.warning("skipping image in ssl batch: %s", exc)
                continue
        views_q.append(augment(img, task.policy, rng))
        views_k.append(augment(img, task.policy, rng))
        if crops is not None:
            region_imgs += [augment(c, task.policy, rng) for c in crops]
    if not views_q:
        raise ContractError("every image in the batch failed region generation")
    vq = np.stack(views_q)[..., None]
    vk = np.stack(views_k)[..., None]
    regions = np.stack(region_imgs)[..., None] if region_imgs else None
    return vq, vk, regions, skipped


def ssl_batch_loss(task: SslTask, views_q: np.ndarray, views_k: np.ndarray,
                   regions: np.ndarray | None, negatives: np.ndarray
                   ) -> tuple[Tensor, dict]:
    """Total loss for pre-augmented views against a fixed negative set."""
    b = views_q.shape[0]
    q = l2_normalize(task.pair.query.forward_features(Tensor(views_q), training=True))
    with no_grad():
        k = l2_normalize(task.pair.key.forward_features(Tensor(views_k), training=True))
    kd = k.data

    pos = (q * Tensor(kd)).sum(axis=1, keepdims=True)
    cols = [pos * (1.0 / task.tau)]
    if negatives.shape[0]:
        sims = T.matmul(q, Tensor(negatives.T))
        if not task.paper_literal_eq2:
            sims = sims * (1.0 / task.tau)
        cols.append(sims)
    logits = T.concat(cols, axis=1)
    cons_mean = T.cross_entropy_rows(logits, np.zeros(b, dtype=np.int64), "mean")

    if regions is not None:
        feats = task.pair.query.forward_features(Tensor(regions), training=True)
        region_logits = task.region_head.forward(feats)
        labels = np.tile(np.arange(5, dtype=np.int64), regions.shape[0] // 5)
        # per image: the five-term region loss; averaged over the batch
        region_mean = T.cross_entropy_rows(region_logits, labels, "sum") * (1.0 / b)
    else:
        region_mean = Tensor(0.0)

    total = cons_mean * task.weights.alpha1 + region_mean * task.weights.alpha2
    parts = {
        "contrastive": cons_mean.item(),
        "region": region_mean.item(),
        "total": total.item(),
        "negatives": int(negatives.shape[0]),
        "keys": kd,
    }
    return total, parts


def ssl_step(task: SslTask, images, rng: np.random.Generator) -> dict:
    """One optimizer step of the self-supervised objective.

    Augments two views per image, embeds them through the query and key
    encoders, draws negatives from the queue, adds the region branch, then
    backpropagates through the query encoder and region head only. Finishes
    with the momentum update and enqueues the new positive keys.
    """
    if len(images) == 0:
        raise ContractError("ssl_step requires a nonempty batch")
    views_q, views_k, regions, skipped = _augmented_batch(task, images, rng)
    negatives = task.queue.as_matrix()
    total, parts = ssl_batch_loss(task, views_q, views_k, regions, negatives)

    params = task.trainable_parameters()
    zero_grads(params)
    total.backward()
    sgd_step(params, lr=task.lr, momentum=task.sgd_momentum,
             weight_decay=task.weight_decay)
    momentum_update(task.pair)
    task.queue.enqueue(parts.pop("keys"))

    parts["skipped"] = skipped
    return parts
