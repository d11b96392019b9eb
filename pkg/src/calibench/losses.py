"""Training objectives for CALI / ICALI as functions of network outputs.

Every loss is a per-image pixel mean (batch size is 1), so magnitudes do not
depend on resolution. Logs are clamped at 1e-12 inside ``ops.log``.
"""
from __future__ import annotations

import numpy as np

from .numkit import ops
from .numkit.tensor import ContractError, ShapeError, Tensor, as_tensor


def _check_one_hot(y: Tensor) -> None:
    d = y.data
    if not (np.all((d == 0) | (d == 1)) and np.all(d.sum(axis=0) == 1)):
        raise ContractError("labels must be one-hot along the class axis")


def _pixel_mean_ce(p: Tensor, y: Tensor) -> Tensor:
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and label {y.shape} differ")
    npix = int(np.prod(p.shape[1:]))
    return ops.mul(ops.sum(ops.mul(y, ops.log(p))), -1.0 / npix)


def seg_loss(p1: Tensor, p2: Tensor, y) -> Tensor:
    """Supervised loss on both heads: ``-(1/2) mean_pixels y . log(p1 * p2)``.

    Written as the sum of the two log terms, which is the same quantity as the
    average of the two cross-entropies.
    """
    y = as_tensor(y)
    _check_one_hot(y)
    if p1.shape != y.shape or p2.shape != y.shape:
        raise ShapeError(f"shapes {p1.shape}, {p2.shape} vs label {y.shape}")
    npix = int(np.prod(y.shape[1:]))
    both = ops.add(ops.log(p1), ops.log(p2))
    return ops.mul(ops.sum(ops.mul(y, both)), -0.5 / npix)


def cross_entropy(p: Tensor, y) -> Tensor:
    y = as_tensor(y)
    return _pixel_mean_ce(p, y)


def domain_loss(d_src, d_tgt) -> Tensor:
    """``V1 = -(CE_s + CE_t) = log d_src + log(1 - d_tgt)``.

    Zero for a perfect discriminator, negative otherwise. G minimises it and D
    maximises it.
    """
    d_src, d_tgt = as_tensor(d_src), as_tensor(d_tgt)
    return ops.add(ops.log(d_src), ops.log(ops.sub(1.0, d_tgt)))


def domain_ce(d_src, d_tgt) -> Tensor:
    """``CE_s + CE_t`` (= -V1), the quantity D descends on."""
    return ops.neg(domain_loss(d_src, d_tgt))


def discrepancy(p, q) -> float:
    """``(1/K) |p - q|_1`` for two length-K distributions."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return float(np.abs(p - q).sum() / p.shape[0])


def class_alignment_loss(p1: Tensor, p2: Tensor) -> Tensor:
    """``V2``: pixel mean of the per-pixel discrepancy between the two heads."""
    if p1.shape != p2.shape:
        raise ShapeError(f"head outputs differ in shape: {p1.shape} vs {p2.shape}")
    return ops.mean(ops.abs(ops.sub(p1, p2)))


def weight_regularization(w1: Tensor, w2: Tensor) -> Tensor:
    """Cosine similarity of the two flattened head weight vectors."""
    n1, n2 = ops.norm(w1), ops.norm(w2)
    if n1.item() == 0.0 or n2.item() == 0.0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    return ops.div(ops.dot(w1, w2), ops.mul(n1, n2))


def mixed_loss(p_m: Tensor, y_m) -> Tensor:
    """Pixel-mean cross-entropy of C1 on a mixed sample."""
    y_m = as_tensor(y_m)
    _check_one_hot(y_m)
    return _pixel_mean_ce(p_m, y_m)
