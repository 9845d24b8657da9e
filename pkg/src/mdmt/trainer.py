"""Alternating (first-order bi-level) training, checkpoints and history.

Each epoch first updates every model parameter over the training batches with
the fusion logits frozen, then takes one optimizer step on the fusion logits
alone using a single training minibatch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, to_flat
from .data import (
    FeatureSpace,
    Field,
    domain_batches,
    generate_synthetic,
    load_cache,
    load_interactions,
    split_dataset,
)
from .metrics import evaluate
from .model import HyperParams
from .variants import build_variant

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MDMTCK1"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# data


def load_dataset(config):
    dc = config.data
    if dc.source == "synthetic":
        return generate_synthetic(dc.synth)
    if dc.source == "csv":
        return load_interactions(dc.path, dc.schema)
    if dc.source == "cache":
        return load_cache(dc.path)
    raise ValueError(f"unknown data.source {dc.source!r}")


def prepare_data(config):
    """Load the configured dataset and split it into (train, valid, test)."""
    return split_dataset(load_dataset(config), config.data.split, config.data.split_seed)


# --------------------------------------------------------------------------
# loss and the two phases


def compute_loss(predictions, labels):
    """Mean over samples of the summed per-task binary cross-entropy."""
    return ad.bce(predictions, labels)


def _rng_seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts])


def epoch_batches(train, config, epoch, stream=0):
    return domain_batches(train, config.batch_size, _rng_seed(config.seed, epoch, stream))


def _digest(params, names):
    h = hashlib.blake2b(digest_size=16)
    for n in names:
        h.update(params[n].data.tobytes())
    return h.hexdigest()


def _step(model, batch, phase, optimizer, lr):
    trainable = model.trainable(phase)
    tape = ad.Tape()
    try:
        with tape:
            tape.watch(*trainable.values())
            loss = compute_loss(model.forward(batch), batch.labels)
            grads = tape.backward(loss)
        optimizer.step(grads, lr)
        return float(loss.data[0])
    finally:
        tape.clear()


def train_model_epoch(model, batches, config, optimizer, epoch=0):
    """One pass over ``batches`` updating all parameters except fusion logits.

    Returns the sample-weighted mean training loss.
    """
    total, count = 0.0, 0
    for i, batch in enumerate(batches):
        try:
            loss = _step(model, batch, "model", optimizer, config.lr)
        except (ad.NonFiniteError, FloatingPointError) as e:
            raise TrainingError(f"non-finite value at epoch {epoch}, batch {i}: {e}") from e
        total += loss * len(batch)
        count += len(batch)
    return total / count if count else float("nan")


def update_fusion_logits(model, batch, config, optimizer, epoch=0):
    """One optimizer step on the fusion logits only, from one training minibatch.

    Returns the minibatch loss (before the step), or ``None`` for models with
    nothing to update.
    """
    if not model.trainable("fusion"):
        return None
    try:
        return _step(model, batch, "fusion", optimizer, config.effective_fusion_lr)
    except (ad.NonFiniteError, FloatingPointError) as e:
        raise TrainingError(f"non-finite fusion gradient at epoch {epoch}: {e}") from e


def pick_fusion_batch(train, config, epoch):
    batches = list(epoch_batches(train, config, epoch, stream=1))
    k = int(np.random.default_rng(_rng_seed(config.seed, epoch, 2)).integers(len(batches)))
    return batches[k]


# --------------------------------------------------------------------------
# history


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    fusion_loss: float | None
    valid: list
    valid_overall_auc: float | None
    valid_overall_logloss: float | None
    fusion_weights: dict | None

    def to_json(self):
        return json.dumps(asdict(self))


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    initial_valid_auc: float | None = None
    best_epoch: int | None = None
    best_valid_auc: float | None = None
    stopped_early: bool = False

    def losses(self):
        return [r.train_loss for r in self.records]

    def to_jsonl(self):
        lines = [r.to_json() for r in self.records]
        lines.append(
            json.dumps(
                {
                    "summary": True,
                    "initial_valid_auc": self.initial_valid_auc,
                    "best_epoch": self.best_epoch,
                    "best_valid_auc": self.best_valid_auc,
                    "stopped_early": self.stopped_early,
                }
            )
        )
        return "".join(line + "\n" for line in lines)


def _weights_snapshot(model):
    w = model.fusion_weights()
    if w is None:
        return None
    return {k: [float(x) for x in getattr(w, k)] for k in ("alpha_d", "alpha_t", "beta_d", "beta_t")}


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    hyper: dict
    tensors: dict
    version: int = CHECKPOINT_VERSION


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(ckpt):
    body = [struct.pack("<I", ckpt.version), struct.pack("<I", len(ckpt.hyper))]
    for k, v in ckpt.hyper.items():
        body.append(_pack_str(k) + _pack_str(v))
    body.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        body.append(_pack_str(name) + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        body.append(a.tobytes())
    payload = b"".join(body)
    return CHECKPOINT_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:7] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: unsupported checkpoint format (bad magic)")
    payload, crc = buf[7:-4], buf[-4:]
    if len(buf) < 15 or struct.unpack("<I", crc)[0] != zlib.crc32(payload):
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    off = 0

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", payload, off)
        off += 4
        return v

    def string():
        nonlocal off
        n = u32()
        s = payload[off : off + n].decode("utf-8")
        off += n
        return s

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    hyper = {}
    for _ in range(u32()):
        k = string()
        hyper[k] = string()
    tensors = {}
    for _ in range(u32()):
        name = string()
        rank = u32()
        shape = struct.unpack_from(f"<{rank}I", payload, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        tensors[name] = arr
    return Checkpoint(hyper, tensors, version)


def _space_hyper(space):
    return {
        "data.fields": ",".join(f"{f.name}:{f.vocab_size}" for f in space.fields),
        "data.domain_count": str(space.domain_count),
        "data.task_count": str(space.task_count),
    }


def space_from_hyper(hyper):
    fields = []
    for item in hyper["data.fields"].split(","):
        name, size = item.rsplit(":", 1)
        fields.append(Field(name, int(size)))
    return FeatureSpace(tuple(fields), int(hyper["data.domain_count"]), int(hyper["data.task_count"]))


def make_checkpoint(model, config, optimizers, state):
    hyper = dict(to_flat(config))
    hyper.update(_space_hyper(model.space))
    hyper.update(model.hyperparameters())
    hyper.update({f"state.{k}": repr(v) for k, v in state.items()})
    tensors = {f"param.{k}": t.data for k, t in model.params.items()}
    for phase, opt in optimizers.items():
        for k, v in opt.state_tensors().items():
            tensors[f"opt.{phase}.{k}"] = v
    return Checkpoint(hyper, {k: np.array(v, dtype=np.float32, copy=True) for k, v in tensors.items()})


def model_from_checkpoint(ckpt):
    h = ckpt.hyper
    hp = HyperParams(**{k: int(h[f"model.{k}"]) for k in asdict(HyperParams())})
    model = build_variant(h["model.variant"], space_from_hyper(h), hp, int(h["model.seed"]))
    for k, t in model.params.items():
        key = f"param.{k}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks parameter {k!r}")
        if ckpt.tensors[key].shape != t.data.shape:
            raise CheckpointError(f"parameter {k!r}: shape {ckpt.tensors[key].shape} vs {t.data.shape}")
        t.data[...] = ckpt.tensors[key]
    return model


def _load_optimizer(opt, ckpt, phase):
    prefix = f"opt.{phase}."
    opt.load_state({k[len(prefix) :]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})


# --------------------------------------------------------------------------
# fit


def fit(config, data=None, resume=None, on_epoch=None):
    """Train per ``config``; returns ``(model, history, best_checkpoint)``.

    ``data`` is ``(train, valid)``; when omitted it is loaded and split from
    the config. ``resume`` is a checkpoint written by this function (see
    ``on_epoch``) to continue from. The returned model carries the
    best-validation parameters.
    """
    if data is None:
        train, valid, _test = prepare_data(config)
    else:
        train, valid = data[0], data[1]
    if resume is not None:
        model = model_from_checkpoint(resume)
    else:
        model = build_variant(config.variant, train.space, config.hp, config.seed)
    optimizers = {
        "model": ad.make_optimizer(config.optimizer, model.trainable("model")),
        "fusion": ad.make_optimizer(config.optimizer, model.trainable("fusion")),
    }
    history = TrainHistory()
    init_report = evaluate(model, valid, "valid")
    history.initial_valid_auc = init_report.overall_auc
    state = {"epoch": 0, "best_auc": None, "best_epoch": None, "wait": 0}
    if resume is not None:
        for phase, opt in optimizers.items():
            _load_optimizer(opt, resume, phase)
        state = {k: eval_literal(resume.hyper[f"state.{k}"]) for k in state}
        history.initial_valid_auc = eval_literal(resume.hyper.get("state.initial_valid_auc", "None"))
    best = make_checkpoint(model, config, optimizers, state)

    model_names = model.model_names
    fusion_names = model.fusion_names
    for epoch in range(state["epoch"], config.epochs):
        frozen = _digest(model.params, fusion_names)
        loss = train_model_epoch(model, epoch_batches(train, config, epoch), config, optimizers["model"], epoch)
        if _digest(model.params, fusion_names) != frozen:
            raise TrainingError("fusion logits changed during the model phase")

        frozen = _digest(model.params, model_names)
        fusion_loss = update_fusion_logits(model, pick_fusion_batch(train, config, epoch), config, optimizers["fusion"], epoch)
        if _digest(model.params, model_names) != frozen:
            raise TrainingError("model parameters changed during the fusion phase")

        report = evaluate(model, valid, "valid")
        auc = report.overall_auc
        history.records.append(
            EpochRecord(
                epoch=epoch + 1,
                train_loss=loss,
                fusion_loss=fusion_loss,
                valid=report.records(),
                valid_overall_auc=auc,
                valid_overall_logloss=report.overall_logloss,
                fusion_weights=_weights_snapshot(model),
            )
        )
        log.info("epoch %d loss %.5f valid auc %s", epoch + 1, loss, auc)
        state["epoch"] = epoch + 1
        improved = auc is not None and (state["best_auc"] is None or auc > state["best_auc"])
        if improved:
            state["best_auc"], state["best_epoch"], state["wait"] = auc, epoch + 1, 0
        else:
            state["wait"] += 1
        ckpt = make_checkpoint(model, config, optimizers, {**state, "initial_valid_auc": history.initial_valid_auc})
        if improved:
            best = ckpt
        if on_epoch is not None:
            on_epoch(epoch + 1, ckpt)
        if not improved and state["wait"] >= config.patience:
            history.stopped_early = epoch + 1 < config.epochs
            break

    history.best_epoch = state["best_epoch"]
    history.best_valid_auc = state["best_auc"]
    if history.best_epoch is not None:
        for k, t in model.params.items():
            t.data[...] = best.tensors[f"param.{k}"]
    return model, history, best


def eval_literal(s):
    """Inverse of ``repr`` for the None/int/float values kept in checkpoint state."""
    if s == "None":
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)
