"""Symmetric InfoNCE, EMA self-distillation and their exact gradients.

Naming: for a batch of N aligned pairs, ``logits[i, j] = z_img[i] . z_txt[j] / tau``.
Row i of ``softmax(logits)`` is image i's distribution over texts; row j of
``softmax(logits.T)`` is text j's distribution over images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import log_softmax_rows, logsumexp_rows, stable_softmax_rows
from .errors import ConfigError, ShapeError
from .model import EmaTeacher, ForwardCache, TwoTowerModel, forward, tower_backward

KL_DIRECTIONS = ("teacher_target", "student_target")
DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class ProbabilityPair:
    image_over_text: np.ndarray
    text_over_image: np.ndarray


@dataclass
class LossReport:
    l_image: float
    l_text: float
    l_infonce: float
    l_kl: float
    total: float
    alpha: float
    grads: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        return {
            "l_image": self.l_image,
            "l_text": self.l_text,
            "l_infonce": self.l_infonce,
            "l_kl": self.l_kl,
            "total": self.total,
        }


def similarity_logits(z_img: np.ndarray, z_txt: np.ndarray, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if z_img.ndim != 2 or z_img.shape != z_txt.shape:
        raise ShapeError(f"embedding batches differ: {z_img.shape} vs {z_txt.shape}")
    return (z_img @ z_txt.T) / tau


def _check_square(logits):
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ShapeError(f"logit matrix must be square, got {logits.shape}")


def match_probabilities(logits: np.ndarray) -> ProbabilityPair:
    _check_square(logits)
    return ProbabilityPair(stable_softmax_rows(logits), stable_softmax_rows(logits.T))


def infonce_loss(logits: np.ndarray) -> tuple[float, float, float]:
    """Return ``(L_I, L_T, (L_I + L_T) / 2)``, evaluated through logsumexp."""
    _check_square(logits)
    diag = np.diagonal(logits)
    l_img = np.mean(logsumexp_rows(logits) - diag)
    l_txt = np.mean(logsumexp_rows(logits.T) - diag)
    return l_img, l_txt, 0.5 * (l_img + l_txt)


def _kl_rows(target_log: np.ndarray, other_log: np.ndarray) -> np.ndarray:
    p = np.exp(target_log)
    # 0 * log 0 contributes nothing
    terms = np.where(p > 0, p * (target_log - other_log), 0.0)
    return terms.sum(axis=1)


def kl_distillation_loss(
    student: ProbabilityPair, teacher: ProbabilityPair, direction: str = "teacher_target"
) -> float:
    """Half the sum of the two per-direction KLs, each averaged over rows.

    With ``direction="teacher_target"`` each term is KL(teacher || student),
    the teacher supplying the soft labels.
    """
    if direction not in KL_DIRECTIONS:
        raise ConfigError(f"unknown KL direction {direction!r}")
    total = 0.0
    for s, t in ((student.image_over_text, teacher.image_over_text),
                 (student.text_over_image, teacher.text_over_image)):
        if s.shape != t.shape:
            raise ShapeError(f"student {s.shape} vs teacher {t.shape}")
        with np.errstate(divide="ignore"):
            ls, lt = np.log(s), np.log(t)
        rows = _kl_rows(lt, ls) if direction == "teacher_target" else _kl_rows(ls, lt)
        total = total + np.mean(rows)
    return 0.5 * total


def _kl_and_grad(s_logits, t_logits, direction):
    """KL averaged over rows of one direction, plus d/d(s_logits)."""
    n = s_logits.shape[0]
    log_p = log_softmax_rows(s_logits)
    log_q = log_softmax_rows(t_logits)
    p = np.exp(log_p)
    if direction == "teacher_target":
        q = np.exp(log_q)
        kl = np.mean(_kl_rows(log_q, log_p))
        grad = (p - q) / n
    else:
        r = log_p - log_q
        kl = np.mean(np.sum(p * r, axis=1))
        grad = p * (r - np.sum(p * r, axis=1, keepdims=True)) / n
    return kl, grad


def loss_from_embeddings(
    z_img: np.ndarray,
    z_txt: np.ndarray,
    tau: float,
    teacher_logits: np.ndarray | None,
    alpha: float = DEFAULT_ALPHA,
    kl_direction: str = "teacher_target",
    need_grad: bool = True,
):
    """Evaluate the combined objective on a (possibly gathered) batch.

    Returns ``(values, d_img, d_txt, d_log_tau)`` where ``values`` is a dict of
    the five loss scalars and the gradients are w.r.t. the unit embeddings.
    ``teacher_logits`` is treated as a constant; ``None`` means no teacher,
    so ``l_kl`` is 0.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    logits = similarity_logits(z_img, z_txt, tau)
    n = logits.shape[0]
    l_img, l_txt, l_info = infonce_loss(logits)
    if teacher_logits is not None:
        if teacher_logits.shape != logits.shape:
            raise ShapeError(f"teacher logits {teacher_logits.shape} vs student {logits.shape}")
        kl_i, g_kl_i = _kl_and_grad(logits, teacher_logits, kl_direction)
        kl_t, g_kl_t = _kl_and_grad(logits.T, teacher_logits.T, kl_direction)
        l_kl = 0.5 * (kl_i + kl_t)
    else:
        l_kl = 0.0 * l_info
    values = {
        "l_image": l_img,
        "l_text": l_txt,
        "l_infonce": l_info,
        "l_kl": l_kl,
        "total": l_info + alpha * l_kl,
    }
    if not need_grad:
        return values, None, None, None

    eye = np.eye(n, dtype=logits.dtype)
    p_img = stable_softmax_rows(logits)
    p_txt = stable_softmax_rows(logits.T)
    d_logits = 0.5 * ((p_img - eye) + (p_txt - eye).T) / n
    if teacher_logits is not None and alpha != 0:
        d_logits = d_logits + alpha * 0.5 * (g_kl_i + g_kl_t.T)
    d_img = (d_logits @ z_txt) / tau
    d_txt = (d_logits.T @ z_img) / tau
    d_log_tau = -np.sum(d_logits * logits)
    return values, d_img, d_txt, d_log_tau


def teacher_logits_for(teacher: EmaTeacher, image_batch, text_batch) -> np.ndarray:
    z_i, _ = forward(teacher.params.image_tower, image_batch)
    z_t, _ = forward(teacher.params.text_tower, text_batch)
    return similarity_logits(z_i, z_t, teacher.params.tau)


def backward(
    model: TwoTowerModel,
    image_cache: ForwardCache,
    text_cache: ForwardCache,
    d_img: np.ndarray,
    d_txt: np.ndarray,
    d_log_tau: float | None = None,
) -> dict[str, np.ndarray]:
    """Turn embedding gradients into a gradient for every student parameter."""
    grads = {}
    for side, tower, cache, d in (
        ("image", model.image_tower, image_cache, d_img),
        ("text", model.text_tower, text_cache, d_txt),
    ):
        d_w, d_b = tower_backward(tower, cache, d)
        for k in range(tower.depth):
            grads[f"{side}.{k}.weight"] = d_w[k]
            grads[f"{side}.{k}.bias"] = d_b[k]
    if model.learn_tau:
        grads["log_tau"] = np.array([0.0 if d_log_tau is None else d_log_tau])
    return grads


def combined_loss(
    model: TwoTowerModel,
    teacher: EmaTeacher | None,
    image_batch: np.ndarray,
    text_batch: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    kl_direction: str = "teacher_target",
) -> LossReport:
    """Total loss ``L_InfoNCE + alpha * L_KL`` with gradients for the student.

    The teacher only supplies target probabilities; nothing flows back into it.
    """
    if image_batch.shape[0] != text_batch.shape[0]:
        raise ShapeError(f"unaligned batches: {image_batch.shape[0]} images, {text_batch.shape[0]} texts")
    z_i, c_i = forward(model.image_tower, image_batch)
    z_t, c_t = forward(model.text_tower, text_batch)
    t_logits = None if teacher is None else teacher_logits_for(teacher, image_batch, text_batch)
    values, d_i, d_t, d_tau = loss_from_embeddings(z_i, z_t, model.tau, t_logits, alpha, kl_direction)
    grads = backward(model, c_i, c_t, d_i, d_t, d_tau)
    return LossReport(alpha=float(alpha), grads=grads, **{k: float(v) for k, v in values.items()})
