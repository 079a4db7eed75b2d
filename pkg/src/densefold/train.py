"""Training loop: epoch driver, k-fold validation rotation, metrics logging,
and binary checkpoints.

Every epoch holds out one fold of a fixed seeded partition for validation
(epoch e validates fold (e-1) mod fold_count) and trains on the rest. All
randomness (shuffling, augmentation, dropout) derives from one root seed, so
a repeated run reproduces the same parameters byte for byte.
"""

from __future__ import annotations

import os
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .data import ArrayDataset, AugmentConfig, augment, kfold_assign, make_batches
from .errors import FormatError, InputError, NumericError
from .model import NetworkSpec, backward, build, forward
from .nn import softmax, softmax_backward
from .optim import SgdState, TrainHyper, cross_entropy_loss, lr_at, mse_loss, sgd_step
from .tensor import FLOAT32, Rng

CSV_HEADER = "epoch,train_loss,train_acc,val_acc,lr,wall_seconds"
CHECKPOINT_MAGIC = b"BDNT"
CHECKPOINT_VERSION = 1


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    wall_seconds: float

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},"
            f"{self.val_acc:.6f},{self.lr:.8g},{self.wall_seconds:.3f}"
        )


def one_hot(labels: np.ndarray, num_classes: int, dtype=FLOAT32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels out of range 0..{num_classes - 1}")
    return np.eye(num_classes, dtype=dtype)[labels]


def assemble_batch(
    dataset: ArrayDataset,
    idx: np.ndarray,
    *,
    epoch: int = 0,
    root_rng: Rng | None = None,
    augment_cfg: AugmentConfig | None = None,
) -> np.ndarray:
    """uint8 storage -> standardized float32 batch, with optional augmentation.

    Augmentation runs on the [0,1] scale before standardization, one derived
    stream per (epoch, original sample index) so draws never depend on batch
    order.
    """
    imgs = dataset.images[idx].astype(FLOAT32) / np.float32(255.0)
    if augment_cfg is not None and augment_cfg.enabled:
        for row in range(len(idx)):
            srng = root_rng.derive("augment", epoch, int(idx[row]))
            imgs[row] = augment(imgs[row], augment_cfg, srng)
    mean = dataset.norm_mean.astype(FLOAT32)[None, :, None, None]
    std = dataset.norm_std.astype(FLOAT32)[None, :, None, None]
    return (imgs - mean) / std


def compute_loss(logits: np.ndarray, labels: np.ndarray, kind: str):
    """Loss value plus gradient w.r.t. logits for the configured objective."""
    if kind == "cross_entropy":
        return cross_entropy_loss(logits, labels)
    probs = softmax(logits)
    loss, grad_probs = mse_loss(probs, one_hot(labels, logits.shape[1], logits.dtype))
    return loss, softmax_backward(probs, grad_probs)


def train_epoch(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    state: SgdState,
    hyper: TrainHyper,
    dataset: ArrayDataset,
    train_idx: np.ndarray,
    *,
    epoch: int,
    root_rng: Rng,
    augment_cfg: AugmentConfig | None = None,
) -> tuple[float, float]:
    """One pass over train_idx; updates params/state in place.

    Returns (mean loss, accuracy) measured on the fly as the model moves.
    """
    eta = lr_at(epoch, hyper)
    batches = make_batches(train_idx, hyper.batch_train, root_rng.derive("shuffle", epoch))
    total_loss = 0.0
    correct = 0
    seen = 0
    for bi, batch in enumerate(batches):
        y = dataset.labels[batch]
        try:
            x = assemble_batch(
                dataset, batch, epoch=epoch, root_rng=root_rng, augment_cfg=augment_cfg
            )
            logits, caches = forward(
                spec, params, x,
                mode="train",
                rng=root_rng.derive("batch", epoch, bi),
                dropout_p=hyper.dropout_p,
            )
            loss, grad_logits = compute_loss(logits, y, hyper.loss_kind)
            if not np.isfinite(loss):
                raise NumericError(f"loss is {loss}")
            grads = backward(spec, params, caches, grad_logits)
            sgd_step(params, grads, state, eta, hyper)
        except NumericError as err:
            raise NumericError(f"{err} (epoch {epoch}, batch {bi}, lr {eta:g})") from None
        total_loss += float(loss) * len(batch)
        correct += int((np.argmax(logits, axis=1) == y).sum())
        seen += len(batch)
    return total_loss / seen, correct / seen


def predict_logits(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    dataset: ArrayDataset,
    idx: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    outs = []
    for batch in make_batches(idx, batch_size):
        x = assemble_batch(dataset, batch)
        logits, _ = forward(spec, params, x, mode="infer")
        outs.append(logits)
    if not outs:
        return np.zeros((0, spec.num_classes), dtype=FLOAT32)
    return np.concatenate(outs, axis=0)


def evaluate_split(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    dataset: ArrayDataset,
    idx: np.ndarray,
    batch_size: int = 64,
) -> tuple[float, np.ndarray]:
    """(accuracy, predicted labels) over idx in inference mode."""
    logits = predict_logits(spec, params, dataset, idx, batch_size)
    preds = np.argmax(logits, axis=1)
    if len(idx) == 0:
        return 0.0, preds
    return float((preds == dataset.labels[idx]).mean()), preds


def fit(
    spec: NetworkSpec,
    hyper: TrainHyper,
    dataset: ArrayDataset,
    out_dir,
    *,
    root_seed: int = 1,
    fold_count: int = 10,
    augment_cfg: AugmentConfig | None = None,
    checkpoint_every: int = 10,
    clock=None,
    log=None,
) -> list[EpochMetrics]:
    """Full training run; writes metrics.csv and checkpoints under out_dir.

    `clock` (default time.perf_counter) supplies the wall_seconds column;
    tests inject a fake one to make the CSV reproducible byte for byte.
    Checkpoints: epoch_NNN.bdnt on the cadence, best.bdnt whenever the
    rotating-fold validation accuracy improves, final.bdnt at the end.
    """
    os.makedirs(out_dir, exist_ok=True)
    if clock is None:
        clock = time.perf_counter
    root_rng = Rng(root_seed)
    params = build(spec, root_rng)
    state = SgdState.for_params(params)
    fold_ids = kfold_assign(len(dataset), fold_count, dataset.fold_seed)
    metrics: list[EpochMetrics] = []
    best_val = -1.0
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="\n") as csv:
        csv.write(CSV_HEADER + "\n")
        for epoch in range(1, hyper.epochs + 1):
            val_fold = (epoch - 1) % fold_count
            train_idx = np.flatnonzero(fold_ids != val_fold)
            val_idx = np.flatnonzero(fold_ids == val_fold)
            assert not np.intersect1d(train_idx, val_idx).size, "fold leakage"
            started = clock()
            train_loss, train_acc = train_epoch(
                spec, params, state, hyper, dataset, train_idx,
                epoch=epoch, root_rng=root_rng, augment_cfg=augment_cfg,
            )
            val_acc, _ = evaluate_split(spec, params, dataset, val_idx, hyper.batch_test)
            row = EpochMetrics(
                epoch, train_loss, train_acc, val_acc, lr_at(epoch, hyper), clock() - started
            )
            metrics.append(row)
            csv.write(row.csv_row() + "\n")
            csv.flush()
            if log is not None:
                log(
                    f"epoch {epoch}/{hyper.epochs}: loss {train_loss:.4f} "
                    f"train {train_acc:.4f} val {val_acc:.4f} lr {row.lr:g} "
                    f"({row.wall_seconds:.1f}s)"
                )
            meta = checkpoint_meta(spec, dataset, epoch=epoch, val_acc=val_acc)
            if val_acc > best_val:
                best_val = val_acc
                save_checkpoint(os.path.join(out_dir, "best.bdnt"), params, state, meta)
            if checkpoint_every and epoch % checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"epoch_{epoch:03d}.bdnt"), params, state, meta
                )
        save_checkpoint(os.path.join(out_dir, "final.bdnt"), params, state, meta)
    return metrics


# ---------------------------------------------------------------------------
# checkpoint container

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def checkpoint_meta(
    spec: NetworkSpec, dataset: ArrayDataset, *, epoch: int, val_acc: float
) -> dict[str, float]:
    """Scalars stored alongside the weights so a checkpoint is self-contained."""
    meta = {
        "depth_n": spec.depth_n,
        "growth_k": spec.growth_k,
        "num_blocks": spec.num_blocks,
        "compression_theta": spec.compression_theta,
        "init_channels": spec.init_channels,
        "bottleneck_width": spec.bottleneck_width,
        "num_classes": spec.num_classes,
        "in_channels": spec.in_channels,
        "image_size": spec.image_size,
        "bn_eps": spec.bn_eps,
        "bn_momentum": spec.bn_momentum,
        "positive_init": int(spec.positive_init),
        "unit_uniform_init": int(spec.unit_uniform_init),
        "fold_seed": dataset.fold_seed,
        "epoch": epoch,
        "val_acc": val_acc,
    }
    for c in range(3):
        meta[f"norm_mean_{c}"] = float(dataset.norm_mean[c])
        meta[f"norm_std_{c}"] = float(dataset.norm_std[c])
    return meta


def spec_from_meta(meta: dict[str, float]) -> NetworkSpec:
    return NetworkSpec(
        depth_n=int(meta["depth_n"]),
        growth_k=int(meta["growth_k"]),
        num_blocks=int(meta["num_blocks"]),
        compression_theta=float(meta["compression_theta"]),
        init_channels=int(meta["init_channels"]),
        bottleneck_width=int(meta["bottleneck_width"]),
        num_classes=int(meta["num_classes"]),
        in_channels=int(meta["in_channels"]),
        image_size=int(meta["image_size"]),
        bn_eps=float(meta["bn_eps"]),
        bn_momentum=float(meta["bn_momentum"]),
        positive_init=bool(int(meta["positive_init"])),
        unit_uniform_init=bool(int(meta["unit_uniform_init"])),
    )


def norm_stats_from_meta(meta: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    mean = np.array([meta[f"norm_mean_{c}"] for c in range(3)])
    std = np.array([meta[f"norm_std_{c}"] for c in range(3)])
    return mean, std


def serialize_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Named-tensor container: magic, version, count, entries, trailing CRC32.

    Every multi-byte field is little-endian. Entry layout: name length (u16),
    UTF-8 name, dtype code (u8: 0=float32, 1=float64), rank (u8), dims
    (u64 each), then the raw payload.
    """
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise InputError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def deserialize_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 14:
        raise FormatError("container too short", offset=len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}",
            offset=len(data) - 4,
        )
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    tensors: dict[str, np.ndarray] = {}
    pos = 10
    end = len(data) - 4
    for _ in range(count):
        if pos + 2 > end:
            raise FormatError("truncated tensor name length", offset=pos)
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + name_len + 2 > end:
            raise FormatError("truncated tensor header", offset=pos)
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}", offset=pos - 2)
        if pos + 8 * rank > end:
            raise FormatError("truncated dims", offset=pos)
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > end:
            raise FormatError(f"truncated payload for tensor {name!r}", offset=pos)
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos)
        tensors[name] = arr.reshape([int(d) for d in shape]).copy()
        pos += nbytes
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes after last tensor", offset=pos)
    return tensors


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    state: SgdState | None = None,
    meta: dict[str, float] | None = None,
) -> None:
    """Write params (+ optimizer velocity, + meta scalars) atomically."""
    tensors: dict[str, np.ndarray] = dict(params)
    if state is not None:
        for name, vel in state.velocity.items():
            tensors[f"velocity.{name}"] = vel
    if meta is not None:
        for key in sorted(meta):
            tensors[f"meta.{key}"] = np.array(float(meta[key]), dtype=np.float64)
    blob = serialize_tensors(tensors)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, float]]:
    """Read a checkpoint back as (params, velocity, meta)."""
    with open(path, "rb") as fh:
        tensors = deserialize_tensors(fh.read())
    params: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    for name, arr in tensors.items():
        if name.startswith("velocity."):
            velocity[name[len("velocity.") :]] = arr
        elif name.startswith("meta."):
            meta[name[len("meta.") :]] = float(arr)
        else:
            params[name] = arr
    return params, velocity, meta
