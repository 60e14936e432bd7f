"""Pseudo labels from prototype scores.

Teacher scores pass through Sinkhorn normalization (batch-balanced, no
gradients); student scores pass through a tempered softmax on the tape.
Because student and pseudo-labeling teacher see differently-augmented
views, each masked student position is matched to its cosine-closest
teacher patch across all folds before the patch loss is applied.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .tensor import softmax

log = logging.getLogger(__name__)


@dataclass
class ClusterAssignments:
    """Probability rows over the prototypes for one fold (or the student)."""
    patch: np.ndarray   # [rows, K_c], each row sums to 1
    cls: np.ndarray     # [batch, K_c] (class-token assignments)
    source: str
    temperature: float


@dataclass
class MatchResult:
    fold_idx: np.ndarray   # [M] chosen fold per student position
    row_idx: np.ndarray    # [M] chosen row within the fold
    distance: np.ndarray   # [M] cosine distance of the chosen pair


def sinkhorn_normalize(scores, n_iters, temperature, return_colstep=False):
    """Balanced assignment rows from raw scores.

    Q = exp(scores / temperature); then alternate column normalization
    (each column sums to B/K_c) and row normalization (each row sums to 1)
    for `n_iters` rounds, ending on the row step. With `return_colstep`
    the intermediate right after the last column step is returned too.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("sinkhorn_normalize requires finite scores")
    b, kc = scores.shape
    logits = scores / temperature
    # float32 matrix with float64 column/row sums: the normalizations are
    # what the balance tolerances depend on, and the entries never need
    # more than f32 once the sums are exact
    q = np.exp(logits - logits.max()).astype(np.float32)
    colstep = None
    for i in range(n_iters):
        # column step: each column sums to B/K_c
        q *= ((b / kc) / q.sum(axis=0, keepdims=True,
                               dtype=np.float64)).astype(np.float32)
        if return_colstep and i == n_iters - 1:
            colstep = q.copy()
        q /= q.sum(axis=1, keepdims=True,
                   dtype=np.float64).astype(np.float32)
    return (q, colstep) if return_colstep else q


def student_assign(scores, temperature):
    """Row-wise tempered softmax, differentiable (stays on the tape)."""
    return softmax(scores * (1.0 / temperature), axis=-1)


def teacher_targets(fold_class_scores, fold_patch_scores, n_iters, temperature):
    """Sinkhorn targets per fold.

    `fold_class_scores`: list of [B, K_c]; `fold_patch_scores`: list of
    [B, F, K_c] arrays (one per fold). Sinkhorn runs across the batch
    dimension, folds kept separate; patch rows of one fold are balanced
    jointly across batch and position.
    """
    out = []
    for k, (cs, ps) in enumerate(zip(fold_class_scores, fold_patch_scores)):
        b, f, kc = ps.shape
        cls = sinkhorn_normalize(cs, n_iters, temperature)
        patch = sinkhorn_normalize(ps.reshape(b * f, kc), n_iters, temperature)
        out.append(ClusterAssignments(patch=patch.reshape(b, f, kc), cls=cls,
                                      source=f"teacher_fold_{k}",
                                      temperature=temperature))
    return out


def _unit_rows(x):
    """Rows scaled to unit norm; zero rows stay zero (logged by callers)."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return x / safe, zero[..., 0]


def nearest_patch_match(student_feats, teacher_fold_feats):
    """Argmin cosine distance from each student row to every teacher row.

    `student_feats`: [M, D]; `teacher_fold_feats`: list of K arrays [F, D].
    Ties resolve to the smallest (fold, row) pair; numpy argmin picks the
    first occurrence, which is exactly that order once folds are stacked.
    Zero-norm rows behave as distance 1 to everything.
    """
    s, s_zero = _unit_rows(np.asarray(student_feats, dtype=np.float32))
    t_all = np.concatenate([np.asarray(t, dtype=np.float32)
                            for t in teacher_fold_feats], axis=0)
    t, t_zero = _unit_rows(t_all)
    if s_zero.any() or t_zero.any():
        log.warning("nearest_patch_match: %d zero-norm rows treated as "
                    "distance 1", int(s_zero.sum() + t_zero.sum()))
    dist = 1.0 - s @ t.T  # [M, K*F]
    flat = dist.argmin(axis=1)
    fold_len = teacher_fold_feats[0].shape[0]
    return MatchResult(fold_idx=flat // fold_len, row_idx=flat % fold_len,
                       distance=dist[np.arange(dist.shape[0]), flat])


def nearest_patch_match_batch(student_feats, teacher_fold_feats):
    """Vectorized per-image matching.

    `student_feats`: [B, M, D]; `teacher_fold_feats`: list of K arrays
    [B, F, D]. Returns (fold_idx, row_idx, distance), each [B, M].
    """
    s, _ = _unit_rows(np.asarray(student_feats, dtype=np.float32))
    t_all = np.concatenate([np.asarray(t, dtype=np.float32)
                            for t in teacher_fold_feats], axis=1)  # [B, K*F, D]
    t, _ = _unit_rows(t_all)
    dist = 1.0 - np.einsum("bmd,bnd->bmn", s, t)
    flat = dist.argmin(axis=2)
    fold_len = teacher_fold_feats[0].shape[1]
    picked = np.take_along_axis(dist, flat[:, :, None], axis=2)[:, :, 0]
    return flat // fold_len, flat % fold_len, picked


def class_target_average(fold_class_assignments):
    """Elementwise mean of the per-fold class distributions."""
    stack = np.stack(fold_class_assignments, axis=0)
    return stack.mean(axis=0)


def mean_row_entropy(rows):
    """Mean Shannon entropy (nats) of probability rows; collapse diagnostic."""
    p = np.asarray(rows, dtype=np.float32)
    return float(entr(p).sum(axis=-1).mean())
