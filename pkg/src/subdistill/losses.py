"""Training losses for subclass distillation.

Subclass logits are [n, c, s] arrays (batch, class, subclass).  Probability
blocks are softmax outputs over all c*s logits of one example.  Every loss
returns its scalar value (in nats) together with the analytic gradient with
respect to the student-side logits or activations; teacher-side inputs are
always treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 1e-12  # floor for probabilities inside cross-entropy logs


class DegenerateLogitsError(ValueError):
    """A logit vector was constant, so it cannot be normalized."""


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    clamp_events: int = 0


@dataclass
class ProjectionDistillResult:
    value: float
    grad_student: np.ndarray     # d loss / d student activations
    grad_projection: np.ndarray  # d loss / d projection matrix


def _check_temperature(t):
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")


def _scaled(z, t):
    z = np.asarray(z)
    if z.ndim != 3:
        raise ValueError(f"expected [n, c, s] logits, got shape {z.shape}")
    return z / np.asarray(t, z.dtype)


def subclass_softmax(z, t=1.0):
    """Softmax over all c*s logits of each example (max-subtracted)."""
    _check_temperature(t)
    zf = _scaled(z, t)
    n = zf.shape[0]
    flat = zf.reshape(n, -1)
    flat = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=1, keepdims=True)).reshape(zf.shape)


def _log_subclass_softmax(z, t):
    zf = _scaled(z, t)
    n = zf.shape[0]
    flat = zf.reshape(n, -1)
    flat = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(flat).sum(axis=1, keepdims=True))
    return (flat - lse).reshape(zf.shape)


def class_marginal(p):
    """Class probabilities: sum the subclass probabilities of each class."""
    return np.asarray(p).sum(axis=2)


def xent_class(p, y, t=1.0):
    """Cross-entropy between class marginals and one-hot targets.

    p is the subclass probability block produced at temperature t; the
    returned gradient is with respect to the underlying logits, flowing
    jointly through the marginalization and the softmax.  A correct-class
    marginal below LOG_CLAMP is clamped and counted.
    """
    _check_temperature(t)
    p = np.asarray(p)
    y = np.asarray(y)
    n, c, _ = p.shape
    if y.shape != (n, c):
        raise ValueError(f"targets shape {y.shape} != ({n}, {c})")
    marg = class_marginal(p)
    correct = (marg * y).sum(axis=1)
    clamp_events = int(np.count_nonzero(correct < LOG_CLAMP))
    value = float(-np.mean(np.log(np.maximum(correct, LOG_CLAMP))))
    # d/dz[i,l,m] = P[i,l,m] * (1 - Y[i,l]/M[i,l]) / (n*t), zero-sum per example
    ratio = y / np.maximum(marg, LOG_CLAMP)
    grad = p * (1.0 - ratio)[:, :, None] / (n * t)
    return LossResult(value=value, grad=grad.astype(p.dtype), clamp_events=clamp_events)


def distill_subclass(p_teacher, logits_student, t=1.0):
    """Temperature-scaled cross-entropy between teacher and student subclass
    probabilities, multiplied by T^2 to keep gradient magnitudes stable.

    The teacher block must have been computed at the same temperature; it
    receives no gradient.
    """
    _check_temperature(t)
    p_t = np.asarray(p_teacher)
    z = np.asarray(logits_student)
    if p_t.shape != z.shape:
        raise ValueError(f"teacher block {p_t.shape} != student logits {z.shape}")
    n = z.shape[0]
    logq = _log_subclass_softmax(z, t)
    value = float(-(t * t) * np.sum(p_t * logq) / n)
    q = np.exp(logq)
    weight = p_t.reshape(n, -1).sum(axis=1)[:, None, None]
    grad = (t / n) * (q * weight - p_t)
    return LossResult(value=value, grad=grad.astype(z.dtype))


def distill_conventional(p_teacher_class, logits_student, t=1.0):
    """Class-level distillation: cross-entropy between teacher class
    probabilities and the student's class marginals at temperature t."""
    _check_temperature(t)
    p_t = np.asarray(p_teacher_class)
    z = np.asarray(logits_student)
    n, c, s = z.shape
    if p_t.shape != (n, c):
        raise ValueError(f"teacher class probs {p_t.shape} != ({n}, {c})")
    zf = _scaled(z, t)
    block_max = zf.max(axis=2, keepdims=True)
    block_e = np.exp(zf - block_max)
    block_lse = np.log(block_e.sum(axis=2)) + block_max[:, :, 0]   # [n, c]
    total_lse = _logsumexp(zf.reshape(n, -1))                      # [n]
    log_marg = block_lse - total_lse[:, None]
    value = float(-(t * t) * np.sum(p_t * log_marg) / n)
    intra = block_e / block_e.sum(axis=2, keepdims=True)
    q = np.exp(zf.reshape(n, -1) - total_lse[:, None]).reshape(z.shape)
    weight = p_t.sum(axis=1)[:, None, None]
    grad = (t / n) * (q * weight - p_t[:, :, None] * intra)
    return LossResult(value=value, grad=grad.astype(z.dtype))


def _logsumexp(flat):
    m = flat.max(axis=1)
    return np.log(np.exp(flat - m[:, None]).sum(axis=1)) + m


def student_loss(distill_term, xent_term, alpha):
    """Task-balance mix: alpha * distill + (1 - alpha) * hard-label loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"task balance must be in [0, 1], got {alpha}")
    return alpha * distill_term + (1.0 - alpha) * xent_term


def teacher_loss(xent_term, aux_term, beta):
    """Teacher objective: hard-label loss plus beta times the auxiliary loss."""
    if beta < 0:
        raise ValueError(f"auxiliary weight must be >= 0, got {beta}")
    return xent_term + beta * aux_term


def penultimate_distill(a_teacher, a_student, w):
    """Mean squared distance between teacher activations and the projected
    student activations; gradients flow to the student and the projection."""
    a_t = np.asarray(a_teacher)
    a_s = np.asarray(a_student)
    w = np.asarray(w)
    n = a_t.shape[0]
    if a_s.shape[0] != n:
        raise ValueError(f"batch mismatch: {a_t.shape[0]} vs {a_s.shape[0]}")
    if w.shape != (a_t.shape[1], a_s.shape[1]):
        raise ValueError(
            f"projection {w.shape} != ({a_t.shape[1]}, {a_s.shape[1]})")
    r = a_t - a_s @ w.T
    value = float(np.sum(r * r) / n)
    grad_student = (-2.0 / n) * (r @ w)
    grad_projection = (-2.0 / n) * (r.T @ a_s)
    return ProjectionDistillResult(value=value,
                                   grad_student=grad_student.astype(a_s.dtype),
                                   grad_projection=grad_projection.astype(w.dtype))


def normalize_logit_vector(v):
    """Zero-mean, unit-L2-norm version of a flattened logit vector.

    Unit norm (rather than unit variance) makes the normalized self dot
    product exactly 1, so the auxiliary loss's -1/T term cancels exactly.
    """
    v = np.asarray(v, dtype=np.result_type(v, np.float32))
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f"expected a flat vector of length >= 2, got shape {v.shape}")
    u = v - v.mean()
    nrm = np.linalg.norm(u)
    if np.ptp(v) == 0 or nrm < np.finfo(v.dtype).tiny:
        raise DegenerateLogitsError("constant logit vector cannot be normalized")
    return u / nrm


def _normalize_rows(mat):
    u = mat - mat.mean(axis=1, keepdims=True)
    nrm = np.linalg.norm(u, axis=1, keepdims=True)
    degenerate = (np.ptp(mat, axis=1) == 0) | (nrm[:, 0] < np.finfo(mat.dtype).tiny)
    if np.any(degenerate):
        bad = int(np.argmax(degenerate))
        raise DegenerateLogitsError(
            f"constant logit vector at batch index {bad} cannot be normalized")
    return u / nrm, nrm


def aux_loss(logits, t_aux=1.0, include_self=True):
    """Contrastive auxiliary loss pushing per-example normalized logit
    vectors apart so that different examples claim different subclasses.

    Computed as mean_i log(sum_j exp(vhat_i . vhat_j / T)) - 1/T - log(n),
    which is non-positive and zero exactly when all vectors coincide.
    include_self=False drops the j == i term (ablation variant).
    """
    _check_temperature(t_aux)
    z = np.asarray(logits)
    n = z.shape[0]
    if z.ndim != 3:
        raise ValueError(f"expected [n, c, s] logits, got shape {z.shape}")
    if not include_self and n < 2:
        raise ValueError("exclude-self variant needs at least 2 examples")
    flat = z.reshape(n, -1).astype(np.result_type(z, np.float32))
    vhat, nrm = _normalize_rows(flat)
    gram = vhat @ vhat.T
    expg = np.exp(gram / t_aux)
    if include_self:
        denom_count = n
    else:
        np.fill_diagonal(expg, 0.0)
        denom_count = n - 1
    row_sum = expg.sum(axis=1)
    value = float(np.mean(np.log(row_sum)) - 1.0 / t_aux - np.log(denom_count))
    s_mat = expg / row_sum[:, None]
    grad_vhat = (s_mat + s_mat.T) @ vhat / (n * t_aux)
    # back through unit-norm then zero-mean
    radial = np.sum(grad_vhat * vhat, axis=1, keepdims=True)
    grad_u = (grad_vhat - radial * vhat) / nrm
    grad_flat = grad_u - grad_u.mean(axis=1, keepdims=True)
    return LossResult(value=value, grad=grad_flat.reshape(z.shape).astype(z.dtype))


def intra_class_softmax(z, t=1.0):
    """Separate softmax over each class's s subclass logits; relative class
    probability is erased, within-class structure is kept."""
    _check_temperature(t)
    zf = _scaled(z, t)
    e = np.exp(zf - zf.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def intra_class_distill(p_teacher_intra, logits_student, t=1.0):
    """Sum of the c per-class cross-entropies between teacher and student
    within-class subclass distributions, each T^2-scaled, averaged over
    examples.  Carries no class-level information to the student."""
    _check_temperature(t)
    q_t = np.asarray(p_teacher_intra)
    z = np.asarray(logits_student)
    if q_t.shape != z.shape:
        raise ValueError(f"teacher intra block {q_t.shape} != student logits {z.shape}")
    n = z.shape[0]
    zf = _scaled(z, t)
    block_max = zf.max(axis=2, keepdims=True)
    block_e = np.exp(zf - block_max)
    log_p = zf - block_max - np.log(block_e.sum(axis=2, keepdims=True))
    value = float(-(t * t) * np.sum(q_t * log_p) / n)
    p_s = np.exp(log_p)
    weight = q_t.sum(axis=2, keepdims=True)
    grad = (t / n) * (p_s * weight - q_t)
    return LossResult(value=value, grad=grad.astype(z.dtype))
