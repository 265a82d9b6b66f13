"""Training loop over simulated data-parallel workers.

Each step the global batch is cut into contiguous per-worker shards. Workers
embed their shard, the embeddings are all-gathered in worker order, and the
loss is taken over the full gathered batch so every cross-shard pair acts as
a negative. Gradients flow back through the gathered embeddings into each
shard and are summed in worker order, so any worker count reproduces the
single-worker result up to floating-point reassociation.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import CheckpointError, ConfigError, FormatError, ShardError, UnsupportedVersionError
from .losses import LossReport, loss_from_embeddings, similarity_logits
from .model import (
    EmaTeacher,
    TowerParams,
    TwoTowerModel,
    ema_init,
    ema_update,
    forward,
    init_model,
    named_params,
    tower_backward,
    with_params,
)
from .optim import CosineSchedule, SgdState, lr_at, sgd_step
from .seeding import derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "zsdistill-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size_per_worker: int = 128
    num_workers: int = 1
    alpha: float = 1.0
    distillation: bool = True
    ema_decay: float = 0.999
    ema_cadence: str = "step"
    kl_direction: str = "teacher_target"
    tau: float = 0.07
    learn_tau: bool = False
    hidden: tuple = (64,)
    embed_dim: int = 32
    activation: str = "tanh"
    lr: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    eta_min: float = 0.0
    schedule_unit: str = "step"
    seed: int = 0
    threads: int = 1
    log_steps: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("batch_size_per_worker", "num_workers", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.schedule_unit not in ("step", "epoch"):
            raise ConfigError(f"schedule_unit must be 'step' or 'epoch', got {self.schedule_unit!r}")
        if self.ema_cadence not in ("step", "epoch"):
            raise ConfigError(f"ema_cadence must be 'step' or 'epoch', got {self.ema_cadence!r}")

    @property
    def global_batch(self) -> int:
        return self.batch_size_per_worker * self.num_workers

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.distillation else 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Checkpoint:
    model: TwoTowerModel
    teacher: EmaTeacher
    sgd_state: SgdState
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list


def gather_embeddings(shards):
    """Concatenate per-worker ``(z_img, z_txt)`` shards in worker order."""
    if not shards:
        raise ShardError("no shards to gather")
    dim = shards[0][0].shape[1]
    for w, (zi, zt) in enumerate(shards):
        if zi.shape[1] != dim or zt.shape[1] != dim or zi.shape[0] != zt.shape[0]:
            raise ShardError(f"worker {w}: shard shapes {zi.shape}/{zt.shape} incompatible with dim {dim}")
    if len(shards) == 1:
        return shards[0]
    return np.concatenate([s[0] for s in shards]), np.concatenate([s[1] for s in shards])


def _shard_forward(model, teacher, images, texts):
    zi, ci = forward(model.image_tower, images)
    zt, ct = forward(model.text_tower, texts)
    tzi, _ = forward(teacher.params.image_tower, images)
    tzt, _ = forward(teacher.params.text_tower, texts)
    return zi, ci, zt, ct, tzi, tzt


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def distributed_loss(model, teacher, images, texts, num_workers, alpha, kl_direction="teacher_target", threads=1):
    """Loss and gradients over ``num_workers`` contiguous shards of one global batch."""
    n = images.shape[0]
    if n % num_workers:
        raise ShardError(f"global batch {n} not divisible by {num_workers} workers")
    b = n // num_workers
    shards = [(images[w * b:(w + 1) * b], texts[w * b:(w + 1) * b]) for w in range(num_workers)]
    outs = _map(lambda x, y: _shard_forward(model, teacher, x, y), shards, threads)
    z_i, z_t = gather_embeddings([(o[0], o[2]) for o in outs])
    t_i, t_t = gather_embeddings([(o[4], o[5]) for o in outs])
    t_logits = similarity_logits(t_i, t_t, teacher.params.tau)
    values, d_i, d_t, d_tau = loss_from_embeddings(z_i, z_t, model.tau, t_logits, alpha, kl_direction)

    def shard_grads(w, o):
        sl = slice(w * b, (w + 1) * b)
        return tower_backward(model.image_tower, o[1], d_i[sl]), tower_backward(model.text_tower, o[3], d_t[sl])

    per_worker = _map(shard_grads, list(enumerate(outs)), threads)
    grads = {}
    # ordered reduction: worker 0 first, regardless of completion order
    for (iw, ib), (tw, tb) in per_worker:
        for side, (dw, db) in (("image", (iw, ib)), ("text", (tw, tb))):
            for k in range(len(dw)):
                for key, val in ((f"{side}.{k}.weight", dw[k]), (f"{side}.{k}.bias", db[k])):
                    grads[key] = val if key not in grads else grads[key] + val
    if model.learn_tau:
        grads["log_tau"] = np.array([d_tau])
    ordered = {name: grads[name] for name in named_params(model)}
    return LossReport(alpha=float(alpha), grads=ordered, **{k: float(v) for k, v in values.items()})


def train_step(model, teacher, images, texts, config: TrainConfig, sgd_state, lr: float, update_teacher=True):
    """forward (student + teacher) -> loss -> backward -> SGD -> EMA, in that order."""
    report = distributed_loss(
        model, teacher, images, texts, config.num_workers, config.effective_alpha, config.kl_direction, config.threads
    )
    params, sgd_state = sgd_step(named_params(model), report.grads, sgd_state, lr)
    model = with_params(model, params)
    if update_teacher:
        teacher = ema_update(teacher, model)
    return report, model, teacher, sgd_state


def initial_checkpoint(dims, config: TrainConfig) -> Checkpoint:
    model = init_model(
        config.seed, dims, config.hidden, config.embed_dim, config.tau, config.activation, config.learn_tau
    )
    teacher = ema_init(model, config.ema_decay)
    return Checkpoint(model, teacher, SgdState(config.momentum, config.weight_decay), 0, 0, config.to_dict())


def _record(kind, epoch, step, lr, reports):
    rec = {"kind": kind, "epoch": epoch, "step": step, "lr": lr}
    for key in ("l_image", "l_text", "l_infonce", "l_kl", "total"):
        rec[key] = float(np.mean([getattr(r, key) for r in reports])) if reports else None
    return rec


def check_writable(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CheckpointError(f"output directory {out} is not writable: {exc}") from exc
    return out


def train(dataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Run ``config.epochs`` epochs; optionally write checkpoint and logs to ``out_dir``.

    ``out_dir`` receives ``checkpoint/``, ``metrics.jsonl`` (deterministic) and
    ``timing.jsonl`` (wall-clock, not reproducible by nature).
    """
    if out_dir is not None:
        out_dir = check_writable(out_dir)
    if config.global_batch > len(dataset):
        raise ConfigError(
            f"global batch {config.global_batch} ({config.num_workers} workers x "
            f"{config.batch_size_per_worker}) exceeds dataset size {len(dataset)}"
        )
    ckpt = initial_checkpoint(dataset.dims, config)
    model, teacher, state = ckpt.model, ckpt.teacher, ckpt.sgd_state
    steps_per_epoch = len(dataset) // config.global_batch
    if config.schedule_unit == "step":
        schedule = CosineSchedule(config.lr, max(1, config.epochs * steps_per_epoch), config.eta_min)
    else:
        schedule = CosineSchedule(config.lr, max(1, config.epochs), config.eta_min)
    metrics, timing = [], []
    step = 0
    t0 = time.perf_counter()
    per_step_teacher = config.ema_cadence == "step"
    for epoch in range(config.epochs):
        reports = []
        lr = None
        for images, texts in data_mod.epoch_batches(
            dataset, config.global_batch, derive_seed(config.seed, f"epoch/{epoch}")
        ):
            lr = lr_at(schedule, step if config.schedule_unit == "step" else epoch)
            report, model, teacher, state = train_step(
                model, teacher, images, texts, config, state, lr, update_teacher=per_step_teacher
            )
            reports.append(report)
            step += 1
            if config.log_steps:
                metrics.append(_record("step", epoch + 1, step, lr, [report]))
        if not per_step_teacher:
            teacher = ema_update(teacher, model)
        rec = _record("epoch", epoch + 1, step, lr, reports)
        metrics.append(rec)
        timing.append({"epoch": epoch + 1, "step": step, "wall_time": time.perf_counter() - t0})
        log.info("epoch %d step %d lr %.3g loss %.5f", epoch + 1, step, lr, rec["total"])
    ckpt = Checkpoint(model, teacher, state, step, config.epochs, config.to_dict())
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint")
        write_jsonl(out_dir / "metrics.jsonl", metrics)
        write_jsonl(out_dir / "timing.jsonl", timing)
    return TrainResult(ckpt, metrics)


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def dataset_loss(model, teacher, dataset, batch_size, alpha=0.0, seed=0) -> dict:
    """Mean loss scalars over fixed-size batches of ``dataset`` (no parameter updates)."""
    reports = [
        distributed_loss(model, teacher, x, y, 1, alpha)
        for x, y in data_mod.epoch_batches(dataset, batch_size, seed)
    ]
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("l_infonce", "l_kl", "total")}


# -- checkpoints -------------------------------------------------------------

def _tensors(ckpt: Checkpoint) -> dict:
    out = {}
    for name, v in named_params(ckpt.model, False).items():
        out[f"student/{name}"] = v
    for name, v in named_params(ckpt.teacher.params, False).items():
        out[f"teacher/{name}"] = v
    for name, v in ckpt.sgd_state.buffers.items():
        out[f"momentum/{name}"] = v
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``manifest.json`` plus ``tensors.bin`` (float64 EMB1 records in manifest order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = _tensors(ckpt)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "tau": ckpt.model.tau,
        "learn_tau": ckpt.model.learn_tau,
        "activation": ckpt.model.image_tower.activation,
        "teacher_tau": ckpt.teacher.params.tau,
        "decay": ckpt.teacher.decay,
        "momentum": ckpt.sgd_state.momentum,
        "weight_decay": ckpt.sgd_state.weight_decay,
        "config": ckpt.config,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    tmp = path / "tensors.bin.tmp"
    with open(tmp, "wb") as fh:
        for v in tensors.values():
            data_mod.write_tensor(fh, v, "f64")
    os.replace(tmp, path / "tensors.bin")
    data_mod._write_json(path / "manifest.json", manifest)


def _tower_from(tensors: dict, prefix: str, side: str, activation: str) -> TowerParams:
    ws, bs = [], []
    k = 0
    while f"{prefix}/{side}.{k}.weight" in tensors:
        ws.append(tensors[f"{prefix}/{side}.{k}.weight"])
        bs.append(tensors[f"{prefix}/{side}.{k}.bias"])
        k += 1
    if not ws:
        raise CheckpointError(f"checkpoint has no {prefix}/{side} layers")
    return TowerParams(tuple(ws), tuple(bs), activation)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}/manifest.json: invalid JSON ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: field 'format' is {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {manifest.get('version')!r} unsupported (this build reads {CHECKPOINT_VERSION})"
        )
    tensors = {}
    try:
        fh = open(path / "tensors.bin", "rb")
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing tensors.bin") from exc
    with fh:
        for entry in manifest["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            try:
                t = data_mod.read_tensor(fh, name)
            except FormatError as exc:
                raise CheckpointError(f"{path}: tensor {name!r}: {exc}") from exc
            if t.dtype != np.float64 or t.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: tensor {name!r} has {t.dtype} {t.shape}, manifest says f64 {shape}")
            tensors[name] = t.reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    act = manifest["activation"]
    model = TwoTowerModel(
        _tower_from(tensors, "student", "image", act),
        _tower_from(tensors, "student", "text", act),
        manifest["tau"],
        manifest["learn_tau"],
    )
    t_model = TwoTowerModel(
        _tower_from(tensors, "teacher", "image", act),
        _tower_from(tensors, "teacher", "text", act),
        manifest["teacher_tau"],
        manifest["learn_tau"],
    )
    bufs = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("momentum/")}
    state = SgdState(manifest["momentum"], manifest["weight_decay"], bufs)
    return Checkpoint(model, EmaTeacher(t_model, manifest["decay"]), state,
                      manifest["step"], manifest["epoch"], manifest["config"])


def checkpoint_arrays(ckpt: Checkpoint) -> dict:
    """Every stored array plus the scalar temperatures, for equality checks."""
    out = dict(_tensors(ckpt))
    out["tau"] = np.array([ckpt.model.tau])
    out["teacher_tau"] = np.array([ckpt.teacher.params.tau])
    return out
