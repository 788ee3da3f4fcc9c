"""Optimization loop: AdamW with decoupled decay, linear-warmup cosine
schedule, variable-length batching, checkpointing, and seeded determinism.

Shuffling is stateless - epoch e uses the stream seeded by (seed, e) - so
resuming from a checkpoint replays the exact batch order without having to
serialize RNG state.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, NonFiniteError, Parameter
from .config import ModelConfig
from .losses import (LossBreakdown, batched_kl_loss, batched_reconstruction_loss,
                     batched_trailerness_loss, total_loss)
from .model import TrailerModel
from .shots import trailerness_ground_truth
from .synthetic import PairExample

_SHUFFLE_TAG = 3  # rng domain separator against model/generator streams


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-4
    warmup_steps: int = -1        # -1: derive as warmup_frac of total_steps
    warmup_frac: float = 0.05
    total_steps: int = 0          # 0: derive from epochs * steps_per_epoch
    batch_size: int = 8
    epochs: int = 200
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0        # <= 0 disables clipping
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalize_by_length: bool = False
    checkpoint_every: int = 0     # epochs between mid-run checkpoints; 0 = final only
    use_conditions: bool = False  # feed stored condition sequences during training

    def validate(self) -> "TrainConfig":
        if self.lr_peak <= 0:
            raise ConfigurationError("lr_peak must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError("loss_weights must be three nonnegative reals")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigurationError("warmup_frac must be in [0, 1)")
        return self

    def resolved(self, num_pairs: int) -> "TrainConfig":
        """Fill in total/warmup step counts for a concrete dataset size."""
        steps_per_epoch = max(1, math.ceil(num_pairs / self.batch_size))
        total = self.total_steps if self.total_steps > 0 else self.epochs * steps_per_epoch
        warmup = self.warmup_steps if self.warmup_steps >= 0 else int(self.warmup_frac * total)
        if total > 0 and warmup >= total:
            raise ConfigurationError(f"warmup_steps {warmup} must be < total_steps {total}")
        return replace(self, total_steps=total, warmup_steps=warmup)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss_weights"] = list(self.loss_weights)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        values = dict(values)
        if "loss_weights" in values:
            values["loss_weights"] = tuple(float(w) for w in values["loss_weights"])
        return cls(**values).validate()


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over the warmup, then cosine decay to 0."""
    total, warmup = cfg.total_steps, cfg.warmup_steps
    if total <= 0:
        raise ConfigurationError("lr_at_step needs a resolved config (total_steps > 0)")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return cfg.lr_peak * step / warmup
    if total == warmup:
        return cfg.lr_peak
    progress = (step - warmup) / (total - warmup)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied to the parameter before the moment update, so a step
    with zero gradients shrinks every parameter by exactly (1 - lr*decay).
    """

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients down to a global L2 norm cap; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class Batch:
    movies: list[np.ndarray]
    trailers: list[np.ndarray]
    conditions: list[np.ndarray] | None
    gt_scores: np.ndarray      # [B, n_max+2] framed trailerness targets, zero-padded
    score_valid: np.ndarray    # [B, n_max+2]


def pad_batch(examples: list[PairExample], gt_cache: dict | None = None,
              use_conditions: bool = False) -> Batch:
    """Assemble per-pair arrays plus padded score targets and validity masks."""
    if not examples:
        raise ValueError("empty batch")
    movies = [ex.movie.embeddings for ex in examples]
    trailers = [ex.trailer.embeddings for ex in examples]
    conditions = None
    if use_conditions:
        if any(ex.condition is None for ex in examples):
            raise ConfigurationError("use_conditions requires a condition per pair")
        conditions = [ex.condition.embeddings for ex in examples]
    lengths = np.array([m.shape[0] + 2 for m in movies], dtype=np.int64)
    full = int(lengths.max())
    gt = np.zeros((len(examples), full), dtype=np.float64)
    for row, ex in enumerate(examples):
        if gt_cache is not None and ex.pair_id in gt_cache:
            scores = gt_cache[ex.pair_id]
        else:
            scores = trailerness_ground_truth(ex.movie.embeddings, ex.trailer.embeddings)
            if gt_cache is not None:
                gt_cache[ex.pair_id] = scores
        gt[row, :scores.shape[0]] = scores
    return Batch(movies=movies, trailers=trailers, conditions=conditions,
                 gt_scores=gt, score_valid=ad.padding_mask(lengths, full))


def batch_loss(model: TrailerModel, batch: Batch, weights=(1.0, 1.0, 1.0),
               normalize: bool = False):
    """Forward pass over one batch; returns (loss tensor, breakdown)."""
    enc = model.encode_batch(batch.movies)
    memory, mem_valid = model.attach_condition(enc, batch.conditions)
    preds, targets, row_valid = model.decode_teacher_forced_batch(
        memory, mem_valid, batch.trailers)
    l_t = None
    if enc.scores is not None:
        l_t = batched_trailerness_loss(enc.scores, batch.gt_scores,
                                       batch.score_valid, normalize)
    l_rec = batched_reconstruction_loss(preds, targets, row_valid, normalize)
    l_kl = batched_kl_loss(preds, targets, row_valid, normalize)
    return total_loss(l_t, l_rec, l_kl, weights)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainResult:
    model: TrailerModel
    optimizer: AdamW
    history: list[dict]
    checkpoint_path: Path | None
    config: TrainConfig


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, _SHUFFLE_TAG, epoch]).permutation(count)


def suggested_decode_cap(examples: list[PairExample]) -> int:
    """Default inference cap: twice the 95th-percentile training trailer length."""
    lengths = sorted(len(ex.trailer) for ex in examples)
    p95 = lengths[min(len(lengths) - 1, math.ceil(0.95 * len(lengths)) - 1)]
    return max(1, 2 * int(p95))


def train(examples: list[PairExample], cfg: TrainConfig, model_cfg: ModelConfig,
          out_dir=None, resume_from=None, data_fingerprint: str = "",
          on_epoch=None) -> TrainResult:
    """Optimize the combined loss over the given pairs.

    ``on_epoch(epoch, model, history)`` runs after each epoch (for eval
    callbacks); checkpoints are written at epoch boundaries.  On a non-finite
    loss the last epoch-boundary checkpoint is preserved and
    ``TrainingDiverged`` is raised.
    """
    if not examples:
        raise ValueError("training needs at least one pair")
    cfg = cfg.validate().resolved(len(examples))
    model_cfg = model_cfg.validate()
    steps_per_epoch = max(1, math.ceil(len(examples) / cfg.batch_size))
    epochs_total = cfg.total_steps // steps_per_epoch

    start_epoch = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        model, optimizer = restore_model_and_optimizer(ck)
        if ck.step % steps_per_epoch != 0:
            raise ConfigurationError("checkpoints are epoch-aligned; cannot resume mid-epoch")
        start_epoch = ck.step // steps_per_epoch
        data_fingerprint = data_fingerprint or ck.data_fingerprint
    else:
        model = TrailerModel(model_cfg, seed=cfg.seed)
        optimizer = AdamW(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps,
                          cfg.weight_decay)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_path / "model.ckpt" if out_path is not None else None

    if model.trailerness is None and cfg.loss_weights[0] != 0.0:
        weights = (0.0, cfg.loss_weights[1], cfg.loss_weights[2])
    else:
        weights = cfg.loss_weights

    gt_cache: dict = {}
    history: list[dict] = []
    step = start_epoch * steps_per_epoch

    def save(path):
        save_checkpoint(path, model, optimizer, cfg, model_cfg, step,
                        data_fingerprint, extras={
                            "suggested_max_len": suggested_decode_cap(examples)})

    for epoch in range(start_epoch, epochs_total):
        order = epoch_order(cfg.seed, epoch, len(examples))
        for lo in range(0, len(examples), cfg.batch_size):
            chunk = [examples[i] for i in order[lo:lo + cfg.batch_size]]
            batch = pad_batch(chunk, gt_cache, use_conditions=cfg.use_conditions)
            try:
                loss, breakdown = batch_loss(model, batch, weights,
                                             cfg.normalize_by_length)
                model.zero_grad()
                loss.backward()
            except NonFiniteError as err:
                # Params are from the last completed step; persist them unless
                # they overflowed too, in which case keep the epoch checkpoint.
                rescue = None
                if ckpt_path is not None:
                    if all(np.isfinite(p.data).all() for p in model.parameters()):
                        save(ckpt_path)
                        rescue = ckpt_path
                    elif ckpt_path.exists():
                        rescue = ckpt_path
                raise TrainingDiverged(str(err), rescue) from err
            clip_gradients(model.parameters(), cfg.clip_norm)
            lr = lr_at_step(step, cfg)
            optimizer.step(lr)
            step += 1
            history.append({"step": step, "lr": lr, **breakdown.as_dict()})
        if ckpt_path is not None and (
                cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
            save(ckpt_path)
        if on_epoch is not None:
            if on_epoch(epoch, model, history) is True:
                break  # early stop requested by the callback
    if ckpt_path is not None:
        save(ckpt_path)
    return TrainResult(model=model, optimizer=optimizer, history=history,
                       checkpoint_path=ckpt_path, config=cfg)


# --------------------------------------------------------------------------
# checkpoint container: magic, u32 header length, JSON header, raw payload
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"TGCKPT01"


@dataclass
class CheckpointData:
    step: int
    model_config: ModelConfig
    train_config: TrainConfig
    data_fingerprint: str
    arrays: dict[str, np.ndarray]
    optimizer_step: int
    extras: dict


def save_checkpoint(path, model: TrailerModel, optimizer: AdamW | None,
                    train_cfg: TrainConfig, model_cfg: ModelConfig, step: int,
                    data_fingerprint: str = "", extras: dict | None = None) -> None:
    named = list(model.named_parameters())
    entries = [(name, p.data) for name, p in named]
    if optimizer is not None:
        by_id = {id(p): name for name, p in named}
        for p, m, v in zip(optimizer.params, optimizer.m, optimizer.v):
            name = by_id[id(p)]
            entries.append((f"optim.m:{name}", m))
            entries.append((f"optim.v:{name}", v))

    table = []
    offset = 0
    blobs = []
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "dtype": str(arr.dtype), "offset": offset})
        offset += len(blob)
        blobs.append(blob)

    header = {
        "version": 1,
        "step": int(step),
        "data_fingerprint": data_fingerprint,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "optimizer": None if optimizer is None else {
            "kind": "adamw", "step": optimizer.step_count,
            "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
        },
        "extras": extras or {},
        "params": table,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    head_len = struct.unpack("<I", raw[8:12])[0]
    header = json.loads(raw[12:12 + head_len].decode())
    if header.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    payload = raw[12 + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise ValueError("checkpoint payload is truncated")
    arrays = {}
    for entry in header["params"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    opt = header.get("optimizer") or {}
    return CheckpointData(
        step=header["step"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        data_fingerprint=header["data_fingerprint"],
        arrays=arrays,
        optimizer_step=opt.get("step", 0),
        extras=header.get("extras", {}),
    )


def restore_model_and_optimizer(ck: CheckpointData) -> tuple[TrailerModel, AdamW]:
    cfg = ck.train_config
    model = TrailerModel(ck.model_config, seed=cfg.seed)
    named = dict(model.named_parameters())
    stored = {n for n in ck.arrays if not n.startswith("optim.")}
    if stored != set(named):
        missing = sorted(set(named) - stored)
        extra = sorted(stored - set(named))
        raise ValueError(f"checkpoint/model parameter mismatch: missing={missing} extra={extra}")
    for name, p in named.items():
        p.data = ck.arrays[name].copy()
    optimizer = AdamW(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    optimizer.step_count = ck.optimizer_step
    for i, (name, _) in enumerate(model.named_parameters()):
        m_key, v_key = f"optim.m:{name}", f"optim.v:{name}"
        if m_key in ck.arrays:
            optimizer.m[i] = ck.arrays[m_key].copy()
            optimizer.v[i] = ck.arrays[v_key].copy()
    return model, optimizer
