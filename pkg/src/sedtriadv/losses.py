"""Training objectives: clip/frame/domain binary cross-entropy and the
labeler-orthogonality penalty.

All losses are fused graph nodes with closed-form vector-Jacobian products.
Reductions are means over contributing entries, so masked entries are
excluded from both the numerator and the denominator and hyperparameter
scales stay independent of batch size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, make_node
from .errors import DegenerateWeights, LabelError, MaskedOutWarning, ShapeError

PROB_CLAMP = 1e-7


def _check_binary(arr: np.ndarray, what: str) -> None:
    if not np.isin(arr, (0.0, 1.0)).all():
        raise LabelError(f"{what} must contain only 0 and 1")


@dataclass
class LabelTensor:
    """Targets for one batch.

    clip_labels: (N, K) in {0,1}. frame_labels: optional (N, T, K).
    frame_mask / clip_mask: optional same-shaped {0,1} arrays; 1 means the
    entry contributes to the loss (pseudo-label IGNORE states map to 0).
    """

    clip_labels: np.ndarray
    frame_labels: np.ndarray | None = None
    frame_mask: np.ndarray | None = None
    clip_mask: np.ndarray | None = None

    def __post_init__(self):
        self.clip_labels = np.asarray(self.clip_labels, dtype=np.float64)
        _check_binary(self.clip_labels, "clip labels")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.float64)
            _check_binary(self.frame_labels, "frame labels")
        if self.frame_mask is not None:
            if self.frame_labels is None:
                raise LabelError("frame mask without frame labels")
            self.frame_mask = np.asarray(self.frame_mask, dtype=np.float64)
            _check_binary(self.frame_mask, "frame mask")
            if self.frame_mask.shape != self.frame_labels.shape:
                raise ShapeError(
                    f"frame mask {self.frame_mask.shape} vs "
                    f"labels {self.frame_labels.shape}")
        if self.clip_mask is not None:
            self.clip_mask = np.asarray(self.clip_mask, dtype=np.float64)
            _check_binary(self.clip_mask, "clip mask")
            if self.clip_mask.shape != self.clip_labels.shape:
                raise ShapeError(
                    f"clip mask {self.clip_mask.shape} vs "
                    f"labels {self.clip_labels.shape}")


def _masked_bce(probs: Tensor, targets: np.ndarray,
                mask: np.ndarray | None, what: str) -> Tensor:
    """-mean over contributing entries of [t log p + (1-t) log(1-p)],
    log arguments clamped at PROB_CLAMP."""
    if probs.shape != targets.shape:
        raise ShapeError(f"{what}: predictions {probs.shape} vs targets {targets.shape}")
    dt = probs.dtype
    t = targets.astype(dt)
    p = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP).astype(dt)
    per = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if mask is None:
        count = per.size
        total = per.sum()
    else:
        m = mask.astype(dt)
        count = m.sum()
        if count == 0:
            warnings.warn(f"{what}: every entry masked out", MaskedOutWarning)
            return Tensor(np.asarray(0.0, dtype=dt))
        total = (per * m).sum()

    def vjp(g):
        inside = (probs.data > PROB_CLAMP) & (probs.data < 1.0 - PROB_CLAMP)
        d = (p - t) / (p * (1.0 - p) * count) * inside
        if mask is not None:
            d = d * mask
        return (g * d,)

    return make_node(np.asarray(total / count, dtype=dt), (probs,), vjp)


def clip_bce(clip_probs: Tensor, labels: LabelTensor) -> Tensor:
    """Clip-level BCE over (i, k); honors labels.clip_mask."""
    return _masked_bce(clip_probs, labels.clip_labels, labels.clip_mask, "clip_bce")


def frame_bce(frame_probs: Tensor, labels: LabelTensor) -> Tensor:
    """Frame-level BCE over contributing (i, t, k); honors labels.frame_mask."""
    if labels.frame_labels is None:
        raise LabelError("frame_bce requires frame labels")
    return _masked_bce(frame_probs, labels.frame_labels, labels.frame_mask,
                       "frame_bce")


def total_classification_loss(clip_probs: Tensor, frame_probs: Tensor,
                              labels: LabelTensor) -> Tensor:
    """Frame BCE plus clip BCE; the frame term is absent for weak-only
    batches (no frame labels)."""
    loss = clip_bce(clip_probs, labels)
    if labels.frame_labels is not None:
        loss = loss + frame_bce(frame_probs, labels)
    return loss


def domain_bce(domain_probs: Tensor, domain_labels: np.ndarray) -> Tensor:
    """BCE between domain probabilities and binary domain labels.

    Accepts per-clip probabilities (N,) or per-frame (N, T'); per-clip
    labels (N,) broadcast across frames in the latter case.
    """
    d = np.asarray(domain_labels, dtype=np.float64)
    _check_binary(d, "domain labels")
    if d.shape != domain_probs.shape:
        if domain_probs.ndim == 2 and d.shape == (domain_probs.shape[0],):
            d = np.broadcast_to(d[:, None], domain_probs.shape)
        else:
            raise ShapeError(
                f"domain labels {d.shape} vs predictions {domain_probs.shape}")
    return _masked_bce(domain_probs, d, None, "domain_bce")


def labeler_orthogonality(w1: Tensor, w2: Tensor) -> Tensor:
    """Absolute cosine similarity of the two flattened weight tensors.

    0 when orthogonal, 1 when parallel; invariant to rescaling either
    argument. Gradient at exactly 0 uses the zero subgradient.
    """
    v1 = w1.data.reshape(-1)
    v2 = w2.data.reshape(-1)
    if v1.shape != v2.shape:
        raise ShapeError(f"weight sizes differ: {v1.size} vs {v2.size}")
    n1 = np.linalg.norm(v1)
    n2 = np.linalg.norm(v2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise DegenerateWeights("zero-norm labeler weights")
    c = float(v1 @ v2) / (n1 * n2)
    value = abs(c)

    def vjp(g):
        s = np.sign(c)
        g1 = s * (v2 / (n1 * n2) - c * v1 / (n1 * n1))
        g2 = s * (v1 / (n1 * n2) - c * v2 / (n2 * n2))
        return (g * g1.reshape(w1.shape).astype(w1.dtype),
                g * g2.reshape(w2.shape).astype(w2.dtype))

    return make_node(np.asarray(value, dtype=w1.dtype), (w1, w2), vjp)
