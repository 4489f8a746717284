"""Binary cross-entropy, Adam, the epoch loop, and best-val-loss checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import FormatError, InvalidConfig, InvalidLabel, NoTrainableParameters, NumericalError, ShapeMismatch
from .model import BackboneConfig, ModelAssembly
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0:
            raise InvalidConfig(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidConfig(f"epochs must be >= 0, got {self.epochs}")


# ---------------------------------------------------------------------------
# loss


def _check_labels(y: np.ndarray):
    if not np.isin(y, (0.0, 1.0)).all():
        raise InvalidLabel(f"labels must be 0 or 1, got values {np.unique(y)[:5]}")


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels ``y``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; clamped entries pass
    no gradient.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeMismatch(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    _check_labels(y)
    n = p.size
    raw = p.data
    pc = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))

    def rule(g):
        return (g * inside * ((1.0 - y) / (1.0 - pc) - y / pc) / n,)

    return T.record("bce", loss, (p,), rule)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> dict[str, Tensor]:
    """One bias-corrected Adam update of every parameter named in ``grads``.

    Returns a new parameter dict; ``state`` is advanced in place.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = dict(params)
    for name, g in grads.items():
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
        theta = params[name].data
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} does not match parameter {theta.shape}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        new = Tensor(theta - update, name=params[name].name)
        out[name] = new
    return out


# ---------------------------------------------------------------------------
# fit


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_accuracy,val_loss,val_accuracy"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.train_accuracy!r},{r.val_loss!r},{r.val_accuracy!r}")
        return "\n".join(lines) + "\n"


@dataclass
class CheckpointRecord:
    """Parameter snapshot. ``epoch`` is -1 for the untrained initial weights."""

    epoch: int
    val_loss: float
    val_metrics: dict
    params: dict[str, np.ndarray]
    model_config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "to_arrays"):
        return data.to_arrays()
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)


def evaluate(model: ModelAssembly, X: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Mean BCE and accuracy (threshold 0.5) of ``model`` on ``(X, y)``."""
    probs = model.predict_proba(X, batch_size=batch_size)
    loss = bce_loss(Tensor._wrap(probs), y).item()
    acc = float(np.mean((probs >= 0.5) == (y == 1)))
    return loss, acc


def _snapshot(model: ModelAssembly, epoch: int, val_loss: float, val_acc: float) -> CheckpointRecord:
    return CheckpointRecord(
        epoch=epoch,
        val_loss=val_loss,
        val_metrics={"accuracy": val_acc},
        params=model.state(),
        model_config={
            "backbone": model.config.to_dict(),
            "reduction_ratio": model.reduction_ratio,
            "frozen": sorted(model.frozen),
        },
        seed=model.seed,
    )


def fit(model: ModelAssembly, train, val, cfg: TrainConfig) -> tuple[TrainHistory, CheckpointRecord]:
    """Train ``model`` in place with Adam on BCE, keeping the lowest-val-loss snapshot.

    ``train`` and ``val`` are ``(X, y)`` pairs or datasets with ``to_arrays``.
    Frozen parameters are never touched. The checkpoint is replaced only on a
    strict improvement, so ties keep the earliest epoch. The model is left
    holding the last epoch's weights; restore the checkpoint explicitly.
    """
    X, y = _as_arrays(train)
    Xv, yv = _as_arrays(val)
    if len(X) == 0 or len(Xv) == 0:
        raise InvalidConfig("training and validation sets must be non-empty")
    _check_labels(y)
    _check_labels(yv)
    names = model.trainable_names()
    if not names:
        raise NoTrainableParameters("every parameter is frozen")

    history = TrainHistory()
    if cfg.epochs == 0:
        loss, acc = evaluate(model, Xv, yv)
        return history, _snapshot(model, -1, loss, acc)

    state = AdamState()
    best: CheckpointRecord | None = None
    n = len(X)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            try:
                current = dict(model.params)
                tracked = [Tensor._wrap(current[k].data, requires_grad=True) for k in names]
                current.update(zip(names, tracked))
                with Graph() as graph:
                    probs = model.forward(X[idx], current)
                    loss = bce_loss(probs, y[idx])
                grads = T.backward(loss, graph, tracked)
                model.params = adam_step(model.params, {k: grads[t] for k, t in zip(names, tracked)}, state, cfg)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum((probs.data >= 0.5) == (y[idx] == 1)))
        val_loss, val_acc = evaluate(model, Xv, yv)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc)
        history.records.append(rec)
        logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch, *[
            rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy])
        if best is None or val_loss < best.val_loss:
            best = _snapshot(model, epoch, val_loss, val_acc)
            history.best_epoch = epoch
    return history, best


def restore(model: ModelAssembly, rec: CheckpointRecord) -> ModelAssembly:
    model.load_state(rec.params)
    return model


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout: one line of UTF-8 JSON manifest, b"\n", the parameter blob as
# little-endian float64 in manifest order, then the blob length as a
# little-endian uint64.


def save_checkpoint(rec: CheckpointRecord, path) -> None:
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": rec.epoch,
        "val_loss": rec.val_loss,
        "metrics": rec.val_metrics,
        "model_config": rec.model_config,
        "seed": rec.seed,
        "parameter_count": rec.parameter_count,
        "parameters": [[name, list(v.shape)] for name, v in rec.params.items()],
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in rec.params.values())
    Path(path).write_bytes(head + blob + struct.pack("<Q", len(blob)))


def load_checkpoint(path) -> CheckpointRecord:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint manifest is not terminated", offset=len(raw))
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}", offset=0) from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')!r}", offset=0)
    start = nl + 1
    if len(raw) < start + 8:
        raise FormatError("checkpoint is truncated before the length trailer", offset=len(raw))
    (blob_len,) = struct.unpack("<Q", raw[-8:])
    if start + blob_len + 8 != len(raw):
        raise FormatError(
            f"checkpoint blob length {len(raw) - start - 8} does not match trailer {blob_len}", offset=len(raw) - 8
        )
    shapes = manifest["parameters"]
    expected = sum(int(np.prod(s)) for _, s in shapes)
    if expected != manifest.get("parameter_count") or expected * 8 != blob_len:
        raise FormatError(f"manifest lists {expected} values but the blob holds {blob_len // 8}", offset=start)
    values = np.frombuffer(raw, dtype="<f8", count=expected, offset=start)
    params, pos = {}, 0
    for name, shape in shapes:
        k = int(np.prod(shape))
        params[name] = values[pos : pos + k].astype(np.float64).reshape(shape)
        pos += k
    return CheckpointRecord(
        epoch=manifest["epoch"],
        val_loss=manifest["val_loss"],
        val_metrics=manifest["metrics"],
        params=params,
        model_config=manifest["model_config"],
        seed=manifest["seed"],
    )


def model_from_checkpoint(rec: CheckpointRecord) -> ModelAssembly:
    from .model import build_model

    cfg = BackboneConfig.from_dict(rec.model_config["backbone"])
    model = build_model(cfg, rec.model_config["reduction_ratio"], seed=rec.seed,
                        freeze=rec.model_config.get("frozen", ()))
    return restore(model, rec)
