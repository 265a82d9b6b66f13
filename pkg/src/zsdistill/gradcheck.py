"""Finite-difference verification of the analytic gradients.

The oracle has its own forward pass and loss formulas and never touches the
backward code. Perturbed losses are computed in extended precision
(``np.longdouble``) so cancellation in the difference quotient stays far
below the tolerance being checked.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .losses import combined_loss
from .model import EmaTeacher, TwoTowerModel, init_model, named_params, with_params

FD_STEP = 1e-5
REL_FLOOR = 1e-8
TOLERANCE = 1e-6


def relative_error(a, b, floor: float = REL_FLOOR):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# Central-difference stencils at base step h: offsets (multiples of h) and weights (divided by h).
STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def _lse(x):
    m = np.max(x, axis=-1, keepdims=True)
    return m[..., 0] + np.log(np.sum(np.exp(x - m), axis=-1))


def _tower_embed(x, layers, activation):
    """Forward one tower; parameters may carry a leading stack axis P."""
    h = x
    for k, (w, b) in enumerate(layers):
        w = w if w.ndim == 3 else w[None]
        b = b[:, None, :] if b.ndim == 2 else b[None, None, :]
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.tanh(h) if activation == "tanh" else np.maximum(h, 0)
    return h / np.sqrt(np.sum(h * h, axis=-1, keepdims=True))


def _kl_rows_ext(target_logits, other_logits):
    lt = target_logits - _lse(target_logits)[..., None]
    lo = other_logits - _lse(other_logits)[..., None]
    return np.sum(np.exp(lt) * (lt - lo), axis=-1)


def oracle_total_loss(params, structure, images, texts, teacher_logits, alpha, kl_direction="teacher_target"):
    """Total loss written out directly from its definition.

    ``params`` maps parameter names to arrays that may be stacked along a
    leading axis; the result then has one loss per stack entry.
    """
    zs = []
    for side, x in (("image", images), ("text", texts)):
        depth, act = structure[side]
        layers = [(params[f"{side}.{k}.weight"], params[f"{side}.{k}.bias"]) for k in range(depth)]
        zs.append(_tower_embed(x, layers, act))
    z_i, z_t = zs
    if "log_tau" in params:
        lt = params["log_tau"]
        tau = np.exp(lt[:, 0] if lt.ndim == 2 else lt[0])
        tau = np.asarray(tau)[..., None, None]
    else:
        tau = structure["tau"]
    s = (z_i @ np.swapaxes(z_t, -1, -2)) / tau
    st = np.swapaxes(s, -1, -2)
    diag = np.diagonal(s, axis1=-2, axis2=-1)
    l_info = 0.5 * (np.mean(_lse(s) - diag, axis=-1) + np.mean(_lse(st) - diag, axis=-1))
    if teacher_logits is None or alpha == 0:
        return l_info
    q, qt = np.broadcast_to(teacher_logits, s.shape), np.broadcast_to(teacher_logits.T, s.shape)
    if kl_direction == "teacher_target":
        kl = np.mean(_kl_rows_ext(q, s), axis=-1) + np.mean(_kl_rows_ext(qt, st), axis=-1)
    else:
        kl = np.mean(_kl_rows_ext(s, q), axis=-1) + np.mean(_kl_rows_ext(st, qt), axis=-1)
    return l_info + alpha * 0.5 * kl


def _structure(model: TwoTowerModel):
    return {
        "image": (model.image_tower.depth, model.image_tower.activation),
        "text": (model.text_tower.depth, model.text_tower.activation),
        "tau": np.longdouble(model.tau),
    }


def numeric_gradients(model, teacher, image_batch, text_batch, alpha, kl_direction="teacher_target",
                      h=FD_STEP, order=4):
    """Central finite differences at step ``h`` for every parameter entry.

    ``order=2`` is the classic ``(L(p+h) - L(p-h)) / 2h``; ``order=4`` adds the
    ``p +- 2h`` points to cancel the O(h^2) truncation term.
    """
    offsets, weights = STENCILS[order]
    ld = np.longdouble
    ext = {k: v.astype(ld) for k, v in named_params(model).items()}
    images, texts = image_batch.astype(ld), text_batch.astype(ld)
    t_logits = None
    if teacher is not None:
        tp = teacher.params
        t_ext = {k: v.astype(ld) for k, v in named_params(tp, False).items()}
        t_struct = _structure(tp)
        zi = _tower_embed(images, [(t_ext[f"image.{k}.weight"], t_ext[f"image.{k}.bias"])
                                   for k in range(t_struct["image"][0])], t_struct["image"][1])[0]
        zt = _tower_embed(texts, [(t_ext[f"text.{k}.weight"], t_ext[f"text.{k}.bias"])
                                  for k in range(t_struct["text"][0])], t_struct["text"][1])[0]
        t_logits = (zi @ zt.T) / ld(tp.tau)
    structure = _structure(model)
    step = ld(h)
    out = {}
    for name, p in ext.items():
        size = p.size
        # stack[j * size + e] is p with entry e shifted by offsets[j] * h
        stack = np.repeat(p.reshape(1, -1), len(offsets) * size, axis=0)
        for j, off in enumerate(offsets):
            stack[j * size + np.arange(size), np.arange(size)] += off * step
        stacked = {**ext, name: stack.reshape((-1, *p.shape))}
        losses = oracle_total_loss(stacked, structure, images, texts, t_logits, alpha, kl_direction)
        losses = losses.reshape(len(offsets), size)
        g = sum(ld(w) * losses[j] for j, w in enumerate(weights)) / step
        out[name] = g.astype(np.float64).reshape(p.shape)
    return out


@dataclass
class CheckResult:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    instances: int
    entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def random_instance(gen: np.random.Generator, n: int, d: int, tau: float, activation="tanh", learn_tau=False):
    seed = int(gen.integers(2**31))
    model = init_model(seed, (d, d), hidden=[d], embed_dim=d, tau=tau, activation=activation, learn_tau=learn_tau)
    # perturb biases away from zero and build a distinct teacher so KL is non-trivial
    params = {k: v + (0.1 * gen.standard_normal(v.shape) if k.endswith("bias") else 0.0)
              for k, v in named_params(model, False).items()}
    model = with_params(model, params)
    t_params = {k: v + 0.2 * gen.standard_normal(v.shape) for k, v in params.items()}
    teacher = EmaTeacher(with_params(model, t_params), 0.9)
    images = gen.standard_normal((n, d))
    texts = gen.standard_normal((n, d))
    return model, teacher, images, texts


def instance_grid(trials: int):
    grid = list(itertools.product((2, 4, 8), (4, 8, 16), (0.0, 0.5, 1.0), (0.07, 1.0)))
    return [grid[i % len(grid)] for i in range(trials)]


def run_gradcheck(trials: int = 108, seed: int = 0, grad_fn=None, kl_direction="teacher_target",
                  order: int = 4) -> CheckResult:
    """Compare analytic and numeric gradients over ``trials`` random instances.

    ``grad_fn(model, teacher, images, texts, alpha)`` returns the analytic
    gradient dict; it defaults to :func:`combined_loss` and is injectable so
    the harness itself can be tested against a deliberately wrong gradient.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if grad_fn is None:
        def grad_fn(model, teacher, images, texts, alpha):
            return combined_loss(model, teacher, images, texts, alpha, kl_direction).grads
    gen = np.random.default_rng(seed)
    worst = CheckResult(0.0, "", (), 0.0, 0.0, 0, 0)
    entries = 0
    for n, d, alpha, tau in instance_grid(trials):
        model, teacher, images, texts = random_instance(gen, n, d, tau)
        analytic = grad_fn(model, teacher, images, texts, alpha)
        numeric = numeric_gradients(model, teacher, images, texts, alpha, kl_direction, order=order)
        for name, g_num in numeric.items():
            err = relative_error(analytic[name], g_num)
            entries += err.size
            i = np.unravel_index(np.argmax(err), err.shape)
            if err[i] > worst.max_rel_err:
                worst = CheckResult(float(err[i]), name, tuple(int(x) for x in i),
                                    float(np.asarray(analytic[name])[i]), float(g_num[i]), 0, 0)
    worst.instances = trials
    worst.entries = entries
    return worst
