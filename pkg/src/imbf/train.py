"""Cost-sensitive training, transfer staging and the checkpoint file format."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import augment, imageops, nn
from .dataset import DatasetManifest, ManifestEntry, Split
from .metrics import ClassificationReport, confusion_matrix
from .rebalance import COARSE_NAMES, SUBCLASS_NAMES
from .seeding import check_seed, hash_seed, make_rng

log = logging.getLogger(__name__)

BINARY = "binary"
MULTI = "multi"
LOSS_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss {loss}")
        self.epoch = epoch


# --------------------------------------------------------------------------
# cost-sensitive loss


def class_weights(counts: Mapping[str, int]) -> dict[str, float]:
    """Balanced inverse-frequency weights ``N / (K * n_c)``."""
    for name, n in counts.items():
        if n <= 0:
            raise ValueError(f"class {name} has count {n}; every class needs at least one sample")
    total = sum(counts.values())
    k = len(counts)
    return {name: total / (k * n) for name, n in counts.items()}


def weighted_cross_entropy(probs: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None):
    """Batch-mean of ``-w[t] * log(max(p_t, 1e-12))`` and its gradient with
    respect to the logits.

    ``probs`` is (N, 1) from a sigmoid head (class 1 is the positive class)
    or (N, K) from a softmax head; ``weights`` has one entry per class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, width = probs.shape
    k = 2 if width == 1 else width
    if targets.shape[0] != n:
        raise ValueError(f"{targets.shape[0]} targets for {n} predictions")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target class out of range for {k} classes")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValueError(f"expected {k} class weights, got shape {w.shape}")
    wt = w[targets]
    if width == 1:
        p = probs[:, 0]
        p_target = np.where(targets == 1, p, 1.0 - p)
        dlogits = (wt * (p - targets))[:, None]
    else:
        p_target = probs[np.arange(n), targets]
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), targets] = 1.0
        dlogits = wt[:, None] * (probs - onehot)
    losses = -wt * np.log(np.maximum(p_target, LOSS_FLOOR))
    return float(losses.sum() / n), dlogits / n


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: AdamConfig = AdamConfig()) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if set(params) != set(grads):
        raise ValueError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# --------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"ICKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class NotACheckpoint(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncated(CheckpointError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    spec: nn.ModelSpec
    tensors: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}
        shapes = self.spec.param_shapes()
        if set(shapes) != set(self.tensors):
            raise CheckpointMismatch(f"tensor names {sorted(self.tensors)} do not match spec {sorted(shapes)}")
        for k, s in shapes.items():
            if self.tensors[k].shape != s:
                raise CheckpointMismatch(f"tensor {k} has shape {self.tensors[k].shape}, spec expects {s}")

    @property
    def task(self) -> str:
        return self.provenance.get("task", BINARY if self.spec.head == nn.SIGMOID else MULTI)

    @property
    def class_names(self) -> list[str]:
        return list(self.provenance.get("class_names", [str(i) for i in range(self.spec.num_classes)]))

    def params(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self.tensors.items()}

    def to_bytes(self) -> bytes:
        directory, offset = [], 0
        names = list(self.spec.param_shapes())
        for name in names:
            nbytes = self.tensors[name].nbytes
            directory.append({"name": name, "shape": list(self.tensors[name].shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        meta = {"spec": self.spec.to_dict(), "tensors": directory, "provenance": self.provenance}
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(self.tensors[n].astype("<f4").tobytes() for n in names)
        return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
            raise NotACheckpoint("not a checkpoint: bad magic bytes")
        if len(data) < _HEADER.size:
            raise CheckpointTruncated("checkpoint truncated inside the header")
        _, version, meta_len = _HEADER.unpack_from(data)
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
        start = _HEADER.size + meta_len
        if len(data) < start:
            raise CheckpointTruncated("checkpoint truncated inside the metadata block")
        try:
            meta = json.loads(data[_HEADER.size:start].decode("utf-8"))
            spec = nn.ModelSpec.from_dict(meta["spec"])
            directory = meta["tensors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointMismatch(f"unreadable checkpoint metadata: {exc}") from exc
        payload = data[start:]
        expected = sum(d["nbytes"] for d in directory)
        if len(payload) < expected:
            raise CheckpointTruncated(f"checkpoint payload has {len(payload)} bytes, directory needs {expected}")
        if len(payload) > expected:
            raise CheckpointMismatch(f"checkpoint payload has {len(payload) - expected} trailing bytes")
        tensors = {}
        for d in directory:
            shape = tuple(d["shape"])
            if d["nbytes"] != 4 * math.prod(shape):
                raise CheckpointMismatch(f"tensor {d['name']}: {d['nbytes']} bytes for shape {shape}")
            raw = payload[d["offset"]: d["offset"] + d["nbytes"]]
            tensors[d["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return cls(spec, tensors, meta.get("provenance", {}))


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# transfer staging


def transfer_init(binary_ckpt: ModelCheckpoint, num_classes: int, seed: int) -> tuple[nn.ModelSpec, dict[str, np.ndarray]]:
    """Multi-class start point from a binary model: every backbone tensor is
    copied as stored, the dense layer is redrawn for ``num_classes`` outputs
    and the head becomes softmax."""
    if binary_ckpt.task != BINARY or binary_ckpt.spec.head != nn.SIGMOID:
        raise TrainingError(f"transfer staging needs a binary checkpoint, got task {binary_ckpt.task!r}")
    if num_classes < 2:
        raise TrainingError(f"need at least 2 classes, got {num_classes}")
    spec = replace(binary_ckpt.spec, out_dim=num_classes, head=nn.SOFTMAX)
    params = {k: v.copy() for k, v in binary_ckpt.tensors.items() if k not in nn.HEAD_TENSORS}
    fresh = nn.init_params(spec, check_seed(seed), names=nn.HEAD_TENSORS)
    params.update({k: v.astype(np.float32) for k, v in fresh.items()})
    nn.check_params(spec, params)
    return spec, params


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    task: str = MULTI
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    policy: str = "l2"
    use_class_weights: bool = True
    init: str = "fresh"
    init_checkpoint: str | None = None
    resolution: int = 32
    channels: int = 3
    dropout: float = 0.2
    num_classes: int | None = None

    def __post_init__(self) -> None:
        if self.task not in (BINARY, MULTI):
            raise ValueError(f"task must be 'binary' or 'multi', got {self.task!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.policy != "none":
            augment.standard_policy(self.policy)
        if self.init not in ("fresh", "checkpoint"):
            raise ValueError(f"init must be 'fresh' or 'checkpoint', got {self.init!r}")
        if self.init == "checkpoint" and not self.init_checkpoint:
            raise ValueError("init='checkpoint' needs init_checkpoint")
        check_seed(self.seed)

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float | None

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "train_loss": self.train_loss, "val_accuracy": self.val_accuracy})


@dataclass
class FitResult:
    checkpoint: ModelCheckpoint
    log: list[EpochRecord]

    def log_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.log)


def task_classes(manifest: DatasetManifest, task: str) -> list[str]:
    if task == BINARY:
        return list(COARSE_NAMES)
    present = {e.label.subclass.value for e in manifest.entries if e.label.subclass is not None}
    return [name for name in SUBCLASS_NAMES if name in present]


def label_of(entry: ManifestEntry, task: str) -> str:
    if task == BINARY:
        return entry.label.coarse.value
    if entry.label.subclass is None:
        raise TrainingError(f"{entry.image_id} has no subclass label for a multi-class task")
    return entry.label.subclass.value


ImageLoader = Callable[..., np.ndarray]


class _ImageCache:
    def __init__(self, loader: ImageLoader, channels: int, resolution: int):
        self.loader = loader
        self.channels = channels
        self.size = (resolution, resolution)
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, entry: ManifestEntry) -> np.ndarray:
        img = self._cache.get(entry.path)
        if img is None:
            try:
                img = self.loader(entry.path, channels=self.channels, size=self.size)
            except OSError as exc:
                raise TrainingError(f"cannot load {entry.path}: {exc}") from exc
            self._cache[entry.path] = img
        return img


def _to_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def predict(spec: nn.ModelSpec, params: dict[str, np.ndarray], x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    for i in range(0, len(x), batch_size):
        probs, _, _ = nn.model_forward(spec, params, x[i:i + batch_size])
        if spec.head == nn.SIGMOID:
            preds.append((probs[:, 0] >= 0.5).astype(np.int64))
        else:
            preds.append(probs.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _initial_model(config: TrainConfig, class_names: list[str]):
    k = len(class_names)
    if config.init == "fresh":
        spec = nn.reference_spec(k, config.resolution, config.channels, config.dropout)
        return spec, nn.init_params(spec, config.seed), {}
    ckpt = load_checkpoint(config.init_checkpoint)
    if config.task == MULTI and ckpt.task == BINARY:
        spec, params = transfer_init(ckpt, k, config.seed)
        origin = {"init": "transfer", "parent_task": BINARY, "parent_classes": ckpt.class_names}
    else:
        if ckpt.task != config.task or ckpt.class_names != class_names:
            raise TrainingError(
                f"checkpoint task {ckpt.task} with classes {ckpt.class_names} cannot initialize "
                f"task {config.task} with classes {class_names}"
            )
        spec, params = ckpt.spec, dict(ckpt.tensors)
        origin = {"init": "resume"}
    if spec.resolution != config.resolution or spec.in_channels != config.channels:
        raise TrainingError(
            f"checkpoint input {spec.in_channels}x{spec.resolution} differs from config "
            f"{config.channels}x{config.resolution}"
        )
    spec = replace(spec, dropout=config.dropout)
    return spec, {k: v.astype(np.float64) for k, v in params.items()}, origin


def fit(config: TrainConfig, manifest: DatasetManifest, image_loader: ImageLoader = imageops.load_image) -> FitResult:
    """Train on the manifest's Train split and validate on its Val split.

    Original training images get a fresh standard-policy draw every epoch
    (keyed by seed, epoch and image_id); materialized intensive copies are used
    as stored. Batches follow a per-epoch seeded permutation of the training
    entries sorted by image_id.
    """
    class_names = task_classes(manifest, config.task)
    if config.num_classes is not None and config.num_classes != len(class_names):
        raise TrainingError(f"config expects {config.num_classes} classes, manifest has {class_names}")
    index = {name: i for i, name in enumerate(class_names)}
    train_entries = sorted(manifest.in_split(Split.TRAIN), key=lambda e: e.image_id)
    val_entries = sorted(manifest.in_split(Split.VAL, originals_only=True), key=lambda e: e.image_id)
    if not train_entries:
        raise TrainingError("manifest has no training entries")
    y_train = np.array([index[label_of(e, config.task)] for e in train_entries], dtype=np.int64)

    counts = {name: int((y_train == i).sum()) for i, name in enumerate(class_names)}
    if config.use_class_weights:
        wmap = class_weights(counts)
        weights = np.array([wmap[name] for name in class_names])
    else:
        weights = np.ones(len(class_names))

    spec, params, origin = _initial_model(config, class_names)
    load = _ImageCache(image_loader, config.channels, config.resolution)
    policy = None if config.policy == "none" else augment.standard_policy(config.policy)
    x_val = np.stack([_to_chw(load(e)) for e in val_entries]) if val_entries else None
    y_val = np.array([index[label_of(e, config.task)] for e in val_entries], dtype=np.int64)

    state = AdamState()
    history = []
    n = len(train_entries)
    for epoch in range(1, config.epochs + 1):
        order = make_rng(hash_seed(config.seed, "shuffle", epoch)).permutation(n)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = []
            for i in idx:
                entry = train_entries[i]
                img = load(entry)
                if policy is not None and entry.is_original:
                    rng = make_rng(hash_seed(config.seed, "standard", epoch, entry.image_id))
                    img = augment.apply_pipeline(img, augment.sample_standard(policy, rng))
                batch.append(_to_chw(img))
            x = np.stack(batch)
            drop_rng = make_rng(hash_seed(config.seed, "dropout", epoch, b))
            probs, _, cache = nn.model_forward(spec, params, x, rng=drop_rng, train=True)
            loss, dlogits = weighted_cross_entropy(probs, y_train[idx], weights)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            grads = nn.model_backward(spec, params, cache, dlogits)
            params, state = adam_step(params, grads, state, config.adam)
            loss_sum += loss * len(idx)
        val_acc = None
        if x_val is not None:
            val_acc = float((predict(spec, params, x_val) == y_val).mean())
        record = EpochRecord(epoch, loss_sum / n, val_acc)
        log.info("epoch %d: train_loss %.5f val_accuracy %s", epoch, record.train_loss, val_acc)
        history.append(record)

    provenance = {
        "task": config.task,
        "class_names": class_names,
        "seed": config.seed,
        "epoch": config.epochs,
        "final_metrics": {"train_loss": history[-1].train_loss, "val_accuracy": history[-1].val_accuracy},
        "class_weights": dict(zip(class_names, weights.tolist())),
        **origin,
    }
    return FitResult(ModelCheckpoint(spec, params, provenance), history)


def evaluate(ckpt: ModelCheckpoint, manifest: DatasetManifest, split: Split | str = Split.TEST,
             image_loader: ImageLoader = imageops.load_image, config: dict | None = None) -> ClassificationReport:
    names = ckpt.class_names
    index = {name: i for i, name in enumerate(names)}
    entries = sorted(manifest.in_split(split, originals_only=True), key=lambda e: e.image_id)
    if not entries:
        raise TrainingError(f"manifest has no {Split(split).value} entries to evaluate")
    labels = []
    for e in entries:
        name = label_of(e, ckpt.task)
        if name not in index:
            raise TrainingError(f"{e.image_id}: class {name} is unknown to the checkpoint ({names})")
        labels.append(index[name])
    load = _ImageCache(image_loader, ckpt.spec.in_channels, ckpt.spec.resolution)
    x = np.stack([_to_chw(load(e)) for e in entries])
    preds = predict(ckpt.spec, ckpt.params(), x)
    cm = confusion_matrix(preds, labels, len(names), names)
    return ClassificationReport.from_confusion(cm, ckpt.task, config)
