"""Training stages, checkpointing, and evaluation.

Stages compose in the fixed order stl_n -> stl_m -> sstl_m -> finetune, any
prefix (or intermediate stage) skippable, never reordered; a model carries
its provenance and each stage appends itself. All randomness flows through a
per-stage seeded generator, so a run is a pure function of (config, seeds).

Checkpoints are a binary snapshot: magic "MSTL", a version word, a JSON
header (backbone config echo, provenance, rng state), then a length-prefixed
name manifest with float64 little-endian blobs for every parameter and
batch-norm buffer. Roundtrips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, Model, build_network
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataIOError,
    UndefinedMetricError,
)
from .leep import LeepInput
from .metrics import EvalResult, evaluate_binary
from .nn import Linear
from .phantom import AugmentPolicy, LabeledDataset, augment, center_crop, load_dataset
from .ssl import (
    EncoderPair,
    LossWeights,
    NegativeQueue,
    SslTask,
    prefill_with_keys,
    ssl_step,
)
from .tensor import Tensor, no_grad, sgd_step, zero_grads

CHECKPOINT_MAGIC = b"MSTL"
CHECKPOINT_VERSION = 1

STAGE_ORDER = ("stl_n", "stl_m", "sstl_m", "finetune")


@dataclass
class StageConfig:
    stage: str
    dataset: str | None = None
    epochs: int = 2
    batch_size: int = 16
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = ()
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # self-supervised settings (paper defaults)
    tau: float = 0.07
    encoder_momentum: float = 0.999
    alpha1: float = 0.8
    alpha2: float = 0.8
    queue_capacity: int = 256
    queue_prefill: bool = True
    paper_literal_eq2: bool = False
    # augmentation
    scale_to: int | None = None
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    gray_prob: float = 0.5

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {self.stage!r}; valid: {STAGE_ORDER}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")


PAPER_STAGE_DEFAULTS = {
    # epochs, batch, lr, decay epochs
    "stl_n": dict(epochs=90, batch_size=512, lr=0.1, lr_decay_epochs=(30, 60, 90)),
    "stl_m": dict(epochs=30, batch_size=64, lr=2e-4, lr_decay_epochs=()),
    "sstl_m": dict(epochs=200, batch_size=256, lr=0.3, lr_decay_epochs=(120, 160)),
    "finetune": dict(epochs=200, batch_size=256, lr=0.3, lr_decay_epochs=(120, 160)),
}


def paper_stage_config(stage: str, **overrides) -> StageConfig:
    """Full-scale defaults per stage; desk runs override size-related fields."""
    if stage not in PAPER_STAGE_DEFAULTS:
        raise ConfigError(f"unknown stage {stage!r}")
    kwargs = dict(PAPER_STAGE_DEFAULTS[stage])
    kwargs.update(overrides)
    return StageConfig(stage=stage, **kwargs)


def lr_at_epoch(config: StageConfig, epoch: int) -> float:
    """Step-decayed learning rate for a 1-based epoch index."""
    drops = sum(1 for d in config.lr_decay_epochs if epoch >= d)
    return config.lr * config.lr_decay_factor ** drops


def check_stage_order(provenance: list[str], new_stage: str) -> None:
    if new_stage not in STAGE_ORDER:
        raise ConfigError(f"unknown stage {new_stage!r}")
    if provenance:
        last = provenance[-1]
        if STAGE_ORDER.index(new_stage) <= STAGE_ORDER.index(last):
            raise ConfigError(
                f"stage {new_stage!r} cannot follow {last!r}; order is {STAGE_ORDER}")


def _augment_policy(model: Model, config: StageConfig) -> AugmentPolicy:
    crop = model.config.input_size
    scale = config.scale_to if config.scale_to else crop + max(8, crop // 8)
    return AugmentPolicy(scale_to=scale, crop_to=crop,
                         flip_prob=config.flip_prob, jitter_prob=config.jitter_prob,
                         gray_prob=config.gray_prob)


def _resolve_dataset(config: StageConfig, dataset: LabeledDataset | None) -> LabeledDataset:
    if dataset is not None:
        return dataset
    if not config.dataset:
        raise ConfigError(f"stage {config.stage} requires a dataset path")
    return load_dataset(config.dataset)


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, indices.size, batch_size):
        yield indices[start:start + batch_size]


# ---------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------


def recalibrate_bn(model: Model, ds: LabeledDataset, indices: np.ndarray,
                   batch_size: int = 32) -> None:
    """Replace batch-norm running stats with statistics of the final weights.

    Running averages recorded during training lag the weights they describe;
    at desk scale (few, fast epochs) the mismatch compounds multiplicatively
    through the layer stack and can make eval-mode activations explode. One
    forward sweep over center-cropped training images with a cumulative
    moving average restores stats that match the trained weights.
    """
    policy = AugmentPolicy(scale_to=model.config.input_size + 8,
                           crop_to=model.config.input_size)
    bns = model.batchnorms()
    saved = [bn.momentum for bn in bns]
    try:
        with no_grad():
            for t, batch_idx in enumerate(_batches(indices, batch_size), start=1):
                for bn in bns:
                    bn.momentum = 1.0 - 1.0 / t  # running <- mean of batch stats
                imgs = np.stack([center_crop(ds.images[i], policy) for i in batch_idx])
                model.forward_features(Tensor(imgs[..., None]), training=True)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m


def _train_supervised(model: Model, config: StageConfig, ds: LabeledDataset) -> dict:
    train_idx = ds.split_indices("train")
    if train_idx.size == 0:
        raise DataIOError("empty training split")
    labels = ds.labels
    if int(labels.max()) + 1 > model.config.num_classes:
        raise ConfigError(
            f"dataset has {int(labels.max()) + 1} classes but the head has "
            f"{model.config.num_classes}")
    policy = _augment_policy(model, config)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    history = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config, epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        total_loss, correct, seen = 0.0, 0, 0
        for batch_idx in _batches(order, config.batch_size):
            imgs = np.stack([augment(ds.images[i], policy, rng) for i in batch_idx])
            x = Tensor(imgs[..., None])
            y = labels[batch_idx]
            logits = model.classify(x, training=True)
            loss = T.cross_entropy_rows(logits, y, "mean")
            zero_grads(params)
            loss.backward()
            sgd_step(params, lr=lr, momentum=config.momentum,
                     weight_decay=config.weight_decay)
            total_loss += loss.item() * batch_idx.size
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += batch_idx.size
        history.append({
            "epoch": epoch, "lr": lr,
            "loss": total_loss / seen, "accuracy": correct / seen,
        })
    if config.epochs > 0:
        recalibrate_bn(model, ds, train_idx, batch_size=config.batch_size)
    return {
        "header": {"stage": config.stage, "epochs": config.epochs,
                   "lr": config.lr, "momentum": config.momentum,
                   "weight_decay": config.weight_decay, "seed": config.seed},
        "epochs": history,
    }


def run_stage_supervised(model: Model, config: StageConfig,
                         dataset: LabeledDataset | None = None) -> dict:
    """Supervised pretraining (stl_n or stl_m) on the train split."""
    if config.stage not in ("stl_n", "stl_m"):
        raise ConfigError("run_stage_supervised handles stl_n/stl_m")
    check_stage_order(model.provenance, config.stage)
    ds = _resolve_dataset(config, dataset)
    history = _train_supervised(model, config, ds)
    model.provenance.append(config.stage)
    return history


def finetune(model: Model, config: StageConfig,
             dataset: LabeledDataset | None = None) -> dict:
    """Re-initialize the head for the target classes, then train supervised."""
    if config.stage != "finetune":
        raise ConfigError("finetune expects a finetune-stage config")
    check_stage_order(model.provenance, "finetune")
    ds = _resolve_dataset(config, dataset)
    num_classes = int(ds.labels.max()) + 1
    model.reset_head(num_classes, seed=config.seed)
    history = _train_supervised(model, config, ds)
    model.provenance.append("finetune")
    return history


# ---------------------------------------------------------------------
# self-supervised training
# ---------------------------------------------------------------------


def run_stage_ssl(model: Model, config: StageConfig,
                  dataset: LabeledDataset | None = None) -> dict:
    """Self-supervised pretraining; labels in the dataset are ignored."""
    if config.stage != "sstl_m":
        raise ConfigError("run_stage_ssl expects a sstl_m-stage config")
    check_stage_order(model.provenance, "sstl_m")
    ds = _resolve_dataset(config, dataset)
    train_idx = ds.split_indices("train")
    if train_idx.size == 0:
        raise DataIOError("empty training split")

    rng = np.random.default_rng(config.seed)
    pair = EncoderPair.create(model, momentum=config.encoder_momentum)
    queue = NegativeQueue(capacity=config.queue_capacity)
    feat_dim = model.config.stage_channels[3]
    policy = _augment_policy(model, config)
    if config.queue_prefill and config.epochs > 0:
        prefill_with_keys(queue, pair.key,
                          [ds.images[i] for i in train_idx], policy)
    head = Linear("region_head", feat_dim, 5,
                  rng=np.random.default_rng(config.seed + 1))
    task = SslTask(
        pair=pair, queue=queue, region_head=head,
        weights=LossWeights(config.alpha1, config.alpha2),
        tau=config.tau, paper_literal_eq2=config.paper_literal_eq2,
        policy=policy,
        lr=config.lr, sgd_momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    history = []
    for epoch in range(1, config.epochs + 1):
        task.lr = lr_at_epoch(config, epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        sums = {"contrastive": 0.0, "region": 0.0, "total": 0.0}
        skipped, steps = 0, 0
        for batch_idx in _batches(order, config.batch_size):
            parts = ssl_step(task, [ds.images[i] for i in batch_idx], rng)
            for key in sums:
                sums[key] += parts[key]
            skipped += parts["skipped"]
            steps += 1
        history.append({
            "epoch": epoch, "lr": task.lr, "skipped": skipped,
            **{k: v / steps for k, v in sums.items()},
        })
    if config.epochs > 0:
        recalibrate_bn(model, ds, train_idx, batch_size=config.batch_size)
    model.provenance.append("sstl_m")
    return {
        "header": {"stage": "sstl_m", "tau": config.tau,
                   "alpha1": config.alpha1, "alpha2": config.alpha2,
                   "encoder_momentum": config.encoder_momentum,
                   "queue_capacity": config.queue_capacity,
                   "paper_literal_eq2": config.paper_literal_eq2,
                   "epochs": config.epochs, "lr": config.lr, "seed": config.seed},
        "epochs": history,
    }


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------


def predict_proba(model: Model, ds: LabeledDataset, indices: np.ndarray,
                  batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities on center-cropped images."""
    policy = AugmentPolicy(scale_to=model.config.input_size + 8,
                           crop_to=model.config.input_size)
    probs = []
    with no_grad():
        for batch_idx in _batches(indices, batch_size):
            imgs = np.stack([center_crop(ds.images[i], policy) for i in batch_idx])
            logits = model.classify(Tensor(imgs[..., None]), training=False).data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(probs, axis=0)


def evaluate(model: Model, dataset: LabeledDataset | str, split: str = "test") -> EvalResult:
    """Deterministic center-crop evaluation with the binary metric set."""
    ds = load_dataset(dataset) if isinstance(dataset, (str, Path)) else dataset
    idx = ds.split_indices(split)
    if idx.size == 0:
        raise ContractError(f"split {split!r} is empty")
    if model.config.num_classes != 2:
        raise ContractError("evaluate targets the binary task")
    labels = ds.labels[idx]
    if np.unique(labels).size < 2:
        raise UndefinedMetricError(f"split {split!r} contains a single class")
    probs = predict_proba(model, ds, idx)
    preds = probs.argmax(axis=1)
    return evaluate_binary(preds, labels, probs[:, 1])


def dummy_distributions(model: Model, ds: LabeledDataset, split: str = "train") -> LeepInput:
    """Source-class probability rows on a target split, for LEEP scoring."""
    idx = ds.split_indices(split)
    if idx.size == 0:
        raise ContractError(f"split {split!r} is empty")
    probs = predict_proba(model, ds, idx)
    return LeepInput(probs, ds.labels[idx])


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<Q", d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.off = offset

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataIOError("truncated checkpoint")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def entry(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(count * 8), dtype="<f8").reshape(shape)
        return name, data.astype(np.float64)


def save_checkpoint(model: Model, path, rng: np.random.Generator | None = None) -> None:
    header = {
        "config": model.config.to_dict(),
        "provenance": list(model.provenance),
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.manifest()
    buffers = model.buffers()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<I", len(hb)), hb,
           struct.pack("<I", len(params)), struct.pack("<I", len(buffers))]
    for name, p in params.items():
        out.append(_pack_entry(name, p.data))
    for name, buf in buffers.items():
        out.append(_pack_entry(name, buf))
    try:
        Path(path).write_bytes(b"".join(out))
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[Model, np.random.Generator | None]:
    p = Path(path)
    if not p.exists():
        raise DataIOError(f"no such checkpoint: {p}")
    blob = p.read_bytes()
    if len(blob) < 12:
        raise DataIOError("truncated checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    reader = _Reader(blob, 8)
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    n_params = reader.u32()
    n_buffers = reader.u32()

    model = build_network(BackboneConfig.from_dict(header["config"]), seed=0)
    model.provenance = [str(s) for s in header["provenance"]]
    manifest = model.manifest()
    seen = set()
    for _ in range(n_params):
        name, data = reader.entry()
        if name not in manifest:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        if manifest[name].shape != data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        manifest[name].data[...] = data
        seen.add(name)
    if seen != set(manifest):
        raise CheckpointError("checkpoint is missing parameters")
    buffers = model.buffers()
    for _ in range(n_buffers):
        name, data = reader.entry()
        if name not in buffers:
            raise CheckpointError(f"unknown buffer {name!r} in checkpoint")
        buffers[name][...] = data

    rng = None
    if header.get("rng_state") is not None:
        rng = np.random.default_rng(0)
        state = header["rng_state"]
        if isinstance(state.get("state"), dict):
            state["state"] = {k: int(v) for k, v in state["state"].items()}
        rng.bit_generator.state = state
    return model, rng
