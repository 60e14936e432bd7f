"""Random token masking and the K-fold partition of masked tokens.

Polarity: m[i] == 1 means the token is MASKED — dropped from the student
input and handed to the teachers. The teachers process the masked
complement split into K equal folds; the student sees the visible set.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class MaskSpec:
    m: np.ndarray              # uint8 vector, length N, 1 = masked
    visible_indices: np.ndarray  # sorted ascending
    masked_indices: np.ndarray   # sorted ascending
    ratio: float

    @property
    def n_tokens(self):
        return self.m.shape[0]


@dataclass
class FoldSet:
    num_folds: int
    folds: list  # K int arrays, equal length, disjoint, covering masked set


def validate_masking(n_tokens, ratio, num_folds):
    """Reject configurations whose fold arithmetic does not come out even."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    if num_folds < 1:
        raise ConfigError(f"fold count must be >= 1, got {num_folds}")
    n_masked = int(round(ratio * n_tokens))
    if n_masked == 0 or n_masked == n_tokens:
        raise ConfigError(
            f"mask ratio {ratio} leaves no {'masked' if n_masked == 0 else 'visible'} "
            f"tokens for N={n_tokens}")
    if n_masked % num_folds != 0:
        raise ConfigError(
            f"masked count must divide evenly into folds: N={n_tokens}, "
            f"ratio={ratio} -> {n_masked} masked, K={num_folds}")
    return n_masked


def gen_mask(n_tokens, ratio, rng):
    """Uniformly random MaskSpec with round(ratio*N) masked tokens."""
    n_masked = int(round(ratio * n_tokens))
    perm = rng.permutation(n_tokens)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    m = np.zeros(n_tokens, dtype=np.uint8)
    m[masked] = 1
    return MaskSpec(m=m, visible_indices=visible, masked_indices=masked,
                    ratio=ratio)


def split_folds(mask, num_folds, rng):
    """Randomly permute the masked indices and chunk them into K folds."""
    n_masked = mask.masked_indices.shape[0]
    if n_masked % num_folds != 0:
        raise ConfigError(
            f"{n_masked} masked tokens do not split into {num_folds} folds")
    shuffled = rng.permutation(mask.masked_indices)
    fold_len = n_masked // num_folds
    folds = [shuffled[k * fold_len:(k + 1) * fold_len] for k in range(num_folds)]
    return FoldSet(num_folds=num_folds, folds=folds)


def gather_fold_patches(patches, fold):
    """Rows of `patches` named by `fold`, in fold order.

    `patches` is [N, P*P*C] or batched [B, N, P*P*C]; the class token is
    prepended later, at embedding time.
    """
    fold = np.asarray(fold)
    n = patches.shape[-2]
    if fold.min() < 0 or fold.max() >= n:
        raise IndexError(f"fold index out of range for {n} patches")
    return np.take(patches, fold, axis=-2)
