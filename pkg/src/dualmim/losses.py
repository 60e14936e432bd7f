"""The three training losses and their weighted combination.

Reconstruction compares student decoder outputs against normalized
reconstruction-teacher tokens at masked positions (cosine); the two
pseudo-label losses are cross entropies against Sinkhorn targets. Targets
are plain arrays, never on the tape, so no gradient can reach a teacher.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .tensor import Tensor

LOG_EPS = 1e-9     # guards log(0) in cross entropy
TARGET_EPS = 1e-6  # guards zero variance in target normalization
_COS_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_c: float = 1.0
    lambda_p: float = 1.0


@dataclass
class LossReport:
    loss_m: float
    loss_c: float
    loss_p: float
    total: float
    total_tensor: object          # scalar Tensor (backward entry point)
    mean_cosine: float = 0.0
    patch_target_entropy: float = 0.0
    class_target_entropy: float = 0.0


def normalize_targets(teacher_tokens, eps=TARGET_EPS):
    """Per-row standardization over the embedding axis, population variance."""
    t = np.asarray(teacher_tokens, dtype=np.float32)
    mu = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True)
    return (t - mu) / np.sqrt(var + eps)


def cosine_recon_loss(student_rows, target_rows):
    """1 - mean cosine similarity between tape rows and constant targets.

    `student_rows`: Tensor [..., D] (decoder outputs at masked positions);
    `target_rows`: array of the same shape, already normalized.
    """
    t = np.asarray(target_rows, dtype=np.float32)
    t_unit = t / (np.linalg.norm(t, axis=-1, keepdims=True) + _COS_EPS)
    s_norm = ((student_rows * student_rows).sum(axis=-1) + _COS_EPS).sqrt()
    cos = (student_rows * Tensor(t_unit)).sum(axis=-1) / s_norm
    return 1.0 - cos.mean()


def recon_loss(decoder_out, teacher_fold_tokens, folds, eps=TARGET_EPS):
    """Eq. of the reconstruction objective over all masked positions.

    `decoder_out`: [B, N+1, D] Tensor (class token at row 0);
    `teacher_fold_tokens`: list of K arrays [B, F, D] of raw teacher patch
    tokens (class rows already stripped), aligned with `folds.folds`.
    Returns (scalar Tensor, mean cosine float).
    """
    positions = np.concatenate(folds.folds)
    targets = np.concatenate(
        [normalize_targets(t, eps) for t in teacher_fold_tokens], axis=1)
    student_rows = decoder_out.take(positions + 1, axis=1)  # +1 skips class row
    loss = cosine_recon_loss(student_rows, targets)
    return loss, 1.0 - float(loss.data)


def cross_entropy(target_rows, predicted):
    """H(p, q) = -sum_c p_c log(q_c + eps), averaged over rows.

    `target_rows` is a constant array of distributions; `predicted` is a
    Tensor of distributions (tempered softmax output).
    """
    p = np.asarray(target_rows, dtype=np.float32)
    rows = int(np.prod(p.shape[:-1]))
    ce = -(Tensor(p) * (predicted + LOG_EPS).log()).sum()
    return ce * (1.0 / rows)


patch_pseudo_loss = cross_entropy
class_pseudo_loss = cross_entropy


def tempered_cross_entropy(target_rows, scores, temperature):
    """cross_entropy(target, student_assign(scores, T)) as one fused op.

    The prototype score tensors are large ([B, M, K_c] with K_c in the
    thousands), so building the tempered softmax, the epsilon guard, and
    the log as separate tape nodes costs several full passes over the
    array plus their gradient buffers. This computes the exact log-softmax
    in the forward pass and applies the closed-form gradient
    (q * sum(p) - p) / (T * rows) in one step. Matches the composed form
    up to the LOG_EPS guard (exact log-softmax needs no guard).
    """
    p = np.asarray(target_rows, dtype=np.float32)
    a = scores if isinstance(scores, Tensor) else Tensor(scores)
    rows = int(np.prod(p.shape[:-1]))
    inv_t = np.float32(1.0 / temperature)
    z = a.data * inv_t
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    logq = z - np.log(denom)
    out_data = np.float32(-(p * logq).sum() / rows)

    def bwd(g):
        q = e / denom
        local = (q * p.sum(axis=-1, keepdims=True) - p)
        local *= np.float32(g * inv_t / rows)
        a._accumulate(local)

    return Tensor._result(out_data, (a,), "tempered_ce", bwd)


def total_loss(weights, loss_m=None, loss_c=None, loss_p=None,
               mean_cosine=0.0, patch_entropy=0.0, class_entropy=0.0):
    """Weighted sum; zero-weight terms must be passed as None (never built).

    The total is always lambda_m*m + lambda_c*c + lambda_p*p in that order.
    """
    terms = []
    vals = {}
    for lam, t, name in ((weights.lambda_m, loss_m, "loss_m"),
                         (weights.lambda_c, loss_c, "loss_c"),
                         (weights.lambda_p, loss_p, "loss_p")):
        vals[name] = 0.0 if t is None else float(t.data)
        if t is not None and not np.isfinite(t.data):
            raise NumericError(f"{name} is not finite: {t.data}")
        if t is not None and lam != 0.0:
            terms.append(t * lam)
    if terms:
        tot = terms[0]
        for t in terms[1:]:
            tot = tot + t
    else:
        tot = Tensor(np.float32(0.0))
    return LossReport(loss_m=vals["loss_m"], loss_c=vals["loss_c"],
                      loss_p=vals["loss_p"], total=float(tot.data),
                      total_tensor=tot, mean_cosine=mean_cosine,
                      patch_target_entropy=patch_entropy,
                      class_target_entropy=class_entropy)
