"""Two-tower MLP encoder with hand-written backprop and an EMA teacher."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import l2_normalize_rows, row_norms
from .errors import ConfigError, ModelError, ShapeError
from .seeding import rng

ACTIVATIONS = ("tanh", "relu")
DEFAULT_TAU = 0.07
DEFAULT_EMA_DECAY = 0.999


@dataclass(frozen=True)
class TowerParams:
    weights: tuple  # each in_dim x out_dim
    biases: tuple  # each (out_dim,)
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ModelError("tower needs matching, non-empty weight and bias lists")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ModelError(f"layer {k}: weight {w.shape} does not match bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ModelError(
                    f"layer {k} expects {w.shape[0]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class TwoTowerModel:
    image_tower: TowerParams
    text_tower: TowerParams
    tau: float = DEFAULT_TAU
    learn_tau: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.image_tower.out_dim != self.text_tower.out_dim:
            raise ModelError(
                f"towers disagree on embedding size: image {self.image_tower.out_dim}, "
                f"text {self.text_tower.out_dim}"
            )

    @property
    def embed_dim(self) -> int:
        return self.image_tower.out_dim


@dataclass(frozen=True)
class EmaTeacher:
    params: TwoTowerModel
    decay: float


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list = field(default_factory=list)  # a_k = h_{k-1} W_k + b_k
    post: list = field(default_factory=list)  # h_k = act(a_k), hidden layers only
    raw: np.ndarray | None = None  # final linear output before normalization
    norms: np.ndarray | None = None
    embeddings: np.ndarray | None = None


def _init_tower(gen: np.random.Generator, dims: list[int], activation: str) -> TowerParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return TowerParams(tuple(weights), tuple(biases), activation)


def init_model(
    seed: int,
    feature_dims: tuple[int, int],
    hidden: list[int] | tuple = (),
    embed_dim: int = 32,
    tau: float = DEFAULT_TAU,
    activation: str = "tanh",
    learn_tau: bool = False,
) -> TwoTowerModel:
    """Build a fresh model; weights are U(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    dims = [*feature_dims, *hidden, embed_dim]
    if any(int(d) <= 0 for d in dims):
        raise ConfigError(f"all dimensions must be positive, got {dims}")
    hidden = [int(h) for h in hidden]
    image = _init_tower(rng(seed, "init/image"), [int(feature_dims[0]), *hidden, int(embed_dim)], activation)
    text = _init_tower(rng(seed, "init/text"), [int(feature_dims[1]), *hidden, int(embed_dim)], activation)
    return TwoTowerModel(image, text, float(tau), bool(learn_tau))


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _act_grad(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    return (a > 0).astype(a.dtype)


def forward(tower: TowerParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    if batch.ndim != 2 or batch.shape[1] != tower.in_dim:
        raise ShapeError(f"tower expects N x {tower.in_dim} input, got {batch.shape}")
    cache = ForwardCache(inputs=batch)
    h = batch
    last = tower.depth - 1
    for k, (w, b) in enumerate(zip(tower.weights, tower.biases)):
        a = h @ w.astype(h.dtype, copy=False) + b.astype(h.dtype, copy=False)
        cache.pre.append(a)
        if k < last:
            h = _act(tower.activation, a)
            cache.post.append(h)
        else:
            h = a
    cache.raw = h
    cache.norms = row_norms(h)
    cache.embeddings = l2_normalize_rows(h)
    return cache.embeddings, cache


def tower_backward(tower: TowerParams, cache: ForwardCache, d_embed: np.ndarray):
    """Map dL/dz (unit embeddings) to per-layer (dW, db) lists."""
    if cache is None or cache.embeddings is None:
        raise ModelError("internal: backward called without a forward cache")
    z = cache.embeddings
    # d/du of u/|u| applied to d_embed
    g = (d_embed - z * np.sum(z * d_embed, axis=1, keepdims=True)) / cache.norms[:, None]
    d_w = [None] * tower.depth
    d_b = [None] * tower.depth
    for k in range(tower.depth - 1, -1, -1):
        h_in = cache.inputs if k == 0 else cache.post[k - 1]
        d_w[k] = h_in.T @ g
        d_b[k] = g.sum(axis=0)
        if k:
            g = g @ tower.weights[k].T
            g = g * _act_grad(tower.activation, cache.pre[k - 1], cache.post[k - 1])
    return d_w, d_b


def named_params(model: TwoTowerModel, include_log_tau: bool = True) -> dict[str, np.ndarray]:
    """Flat, ordered view of every parameter. ``log_tau`` appears only when learnable."""
    out = {}
    for side, tower in (("image", model.image_tower), ("text", model.text_tower)):
        for k, (w, b) in enumerate(zip(tower.weights, tower.biases)):
            out[f"{side}.{k}.weight"] = w
            out[f"{side}.{k}.bias"] = b
    if include_log_tau and model.learn_tau:
        out["log_tau"] = np.array([math.log(model.tau)])
    return out


def with_params(model: TwoTowerModel, params: dict[str, np.ndarray]) -> TwoTowerModel:
    """Inverse of :func:`named_params`; missing names keep their current values."""
    towers = {}
    for side, tower in (("image", model.image_tower), ("text", model.text_tower)):
        ws, bs = [], []
        for k, (w, b) in enumerate(zip(tower.weights, tower.biases)):
            nw = params.get(f"{side}.{k}.weight", w)
            nb = params.get(f"{side}.{k}.bias", b)
            if nw.shape != w.shape or nb.shape != b.shape:
                raise ModelError(f"{side}.{k}: shape mismatch {nw.shape}/{nb.shape} vs {w.shape}/{b.shape}")
            ws.append(nw)
            bs.append(nb)
        towers[side] = TowerParams(tuple(ws), tuple(bs), tower.activation)
    tau = model.tau
    if "log_tau" in params and model.learn_tau:
        tau = float(math.exp(params["log_tau"][0]))
    return TwoTowerModel(towers["image"], towers["text"], tau, model.learn_tau)


def ema_init(student: TwoTowerModel, decay: float = DEFAULT_EMA_DECAY) -> EmaTeacher:
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1), got {decay}")
    copied = with_params(student, {k: v.copy() for k, v in named_params(student, False).items()})
    return EmaTeacher(copied, float(decay))


def ema_update(teacher: EmaTeacher, student: TwoTowerModel) -> EmaTeacher:
    """p_t <- d * p_t + (1 - d) * p_s for every parameter, temperature included."""
    d = teacher.decay
    t_params = named_params(teacher.params, False)
    s_params = named_params(student, False)
    if t_params.keys() != s_params.keys():
        raise ModelError("teacher and student have different layer structure")
    new = {}
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ModelError(f"{name}: teacher {pt.shape} vs student {ps.shape}")
        # equal entries stay bit-identical; d*p + (1-d)*p can round away from p
        new[name] = np.where(pt == ps, pt, d * pt + (1.0 - d) * ps)
    t_tau, s_tau = teacher.params.tau, student.tau
    tau = t_tau if t_tau == s_tau else d * t_tau + (1.0 - d) * s_tau
    params = replace(with_params(teacher.params, new), tau=tau)
    return EmaTeacher(params, d)
