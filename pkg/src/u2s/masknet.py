"""Per-category attention masks, their selection by confusing-set lookup,
the bridge logits, and the weight regularizer that pushes confusable
categories' combiner columns apart."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import LayerSpec, Tensor, apply_layer, channel_mix, global_avg_pool, sigmoid
from .csm import Csm

logger = logging.getLogger(__name__)

NORM_CLAMP = 1e-12

COMBINE_MODES = ("binary", "soft", "simple")
SIMILARITY_KINDS = ("affine_cos", "cos_squared")


@dataclass
class MaskSet:
    raw: Tensor        # (N, T, M, H, W), unbounded combiner outputs
    activated: Tensor  # sigmoid(raw), the actual gating values in [0, 1]


def generate_category_masks(features: Tensor, head: LayerSpec) -> MaskSet:
    """One spatial mask per category from a per-position linear feature combiner."""
    if head.kind != "per_position_linear":
        raise ValueError(f"mask head must be per_position_linear, got {head.kind!r}")
    raw = apply_layer(head, features)
    return MaskSet(raw=raw, activated=sigmoid(raw))


def bridge_logits(masks: MaskSet) -> Tensor:
    """Pool the raw (pre-sigmoid) masks over T, H, W into (N, M) logits.

    Pooling the raw maps keeps the logits unbounded, as cross-entropy expects.
    """
    return global_avg_pool(masks.raw)


def _selection_weights(predicted: np.ndarray, csm: Csm, mode: str) -> np.ndarray:
    m = csm.num_classes
    predicted = np.asarray(predicted)
    if predicted.ndim != 1:
        raise ValueError(f"predicted must be a vector of class indices, got shape {predicted.shape}")
    if predicted.size and (predicted.min() < 0 or predicted.max() >= m):
        bad = predicted[(predicted < 0) | (predicted >= m)][0]
        raise ValueError(f"invalid class index {int(bad)} for {m} classes")
    predicted = predicted.astype(np.intp)

    if mode == "binary":
        cols = csm.C_bin[:, predicted].T  # (N, M); diagonal keeps the class itself selected
    elif mode == "soft":
        cols = csm.S[:, predicted].T
    elif mode == "simple":
        cols = np.zeros((predicted.size, m))
        cols[np.arange(predicted.size), predicted] = 1.0
    else:
        raise ValueError(f"unknown combine mode {mode!r}")
    return cols / cols.sum(axis=1, keepdims=True)


def combine_masks_for_prediction(
    masks: MaskSet, predicted: np.ndarray, csm: Csm, mode: str | None = None
) -> Tensor:
    """Average the activated masks of each sample's confusing set into one
    (N, T, 1, H, W) gate.

    Binary mode averages the masks flagged in the predicted class's CSM
    column (always including the class itself, so a class with no confusing
    partners degrades to plain self-attention). Soft mode weights every mask
    by its similarity to the prediction; simple mode takes only the predicted
    class's mask.
    """
    weights = _selection_weights(predicted, csm, mode or csm.mode)
    return channel_mix(masks.activated, weights)


def weight_similarity_matrix(
    W: np.ndarray, kind: str = "affine_cos"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Similarity s(w_i, w_j) in [0, 1] between combiner columns.

    Returns (S_w, unit_columns, clamped_norms); the latter two feed the
    regularizer's gradient. affine_cos maps cosine to (1 + cos) / 2;
    cos_squared pushes toward orthogonality instead of antiparallelism.
    """
    if kind not in SIMILARITY_KINDS:
        raise ValueError(f"unknown weight similarity kind {kind!r}")
    W = np.asarray(W, dtype=np.float64)
    norms = np.sqrt((W * W).sum(axis=0))
    if (norms < NORM_CLAMP).any():
        logger.warning(
            "mask head columns %s have near-zero norm; clamped at %g for the cosine",
            np.flatnonzero(norms < NORM_CLAMP).tolist(),
            NORM_CLAMP,
        )
    norms = np.maximum(norms, NORM_CLAMP)
    unit = W / norms[None, :]
    cos = unit.T @ unit
    cos = np.clip((cos + cos.T) / 2.0, -1.0, 1.0)
    s_w = (1.0 + cos) / 2.0 if kind == "affine_cos" else cos * cos
    return s_w, unit, norms


def selected_pair_mask(csm: Csm) -> np.ndarray:
    """Ordered-pair selector: the binary CSM minus its diagonal."""
    return csm.C_bin - np.eye(csm.num_classes)


def mean_selected_weight_similarity(W: np.ndarray, csm: Csm, kind: str = "affine_cos") -> float:
    """Mean s(w_i, w_j) over the confusing (selected) ordered pairs; 0 if none."""
    sel = selected_pair_mask(csm)
    n_pos = sel.sum()
    if n_pos == 0:
        return 0.0
    s_w, _, _ = weight_similarity_matrix(W, kind)
    return float((s_w * sel).sum() / n_pos)


def category_regularizer(head: LayerSpec, csm: Csm, kind: str = "affine_cos") -> Tensor:
    """Differentiable mean column similarity over confusing pairs.

    The count of selected ordered pairs normalizes the sum; with no selected
    pairs the result is a constant zero. Gradients flow to the head's weight
    matrix only (the bias plays no role).
    """
    weight = head.weight
    if weight is None:
        raise ValueError("mask head carries no weight matrix")
    sel = selected_pair_mask(csm)
    n_pos = float(sel.sum())
    if n_pos == 0:
        return Tensor(0.0)

    s_w, unit, norms = weight_similarity_matrix(weight.data, kind)
    value = (s_w * sel).sum() / n_pos
    if not weight.requires_grad:
        return Tensor(value)

    def vjp(g):
        if kind == "affine_cos":
            gram = 2.0 * s_w - 1.0
            dprime = np.full_like(s_w, 0.5)
        else:
            gram = np.clip(unit.T @ unit, -1.0, 1.0)
            gram = (gram + gram.T) / 2.0
            dprime = 2.0 * gram
        p = sel * dprime  # (M, M), symmetric
        term1 = unit @ p
        term2 = unit * (p * gram).sum(axis=1)[None, :]
        dW = (2.0 / n_pos) * (term1 - term2) / norms[None, :]
        weight._accumulate(g.item() * dW)

    return Tensor(value, requires_grad=True, _prev=(weight,), _vjp=vjp)
