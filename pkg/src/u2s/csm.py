"""Channel-sparsity signatures, the category similarity matrix, and its
threshold binarization driven by a target average confusing degree."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NONZERO_EPS = 1e-6  # relu outputs can be denormal-small; exact zero is too strict


@dataclass
class SparsitySignature:
    per_channel: np.ndarray  # values in [0, 1], length C
    category: int | None = None
    support_count: int = 1


@dataclass
class Csm:
    """Real similarity matrix S plus its binarization at threshold alpha."""

    S: np.ndarray       # (M, M) in [0, 1], symmetric, unit diagonal
    C_bin: np.ndarray   # (M, M) in {0, 1}, C_bin[i,j] = 1 iff S[i,j] >= alpha
    alpha: float
    mode: str = "binary"  # "binary" | "soft"

    @property
    def num_classes(self) -> int:
        return self.S.shape[0]

    def validate(self) -> None:
        m = self.S.shape[0]
        if self.S.shape != (m, m) or self.C_bin.shape != (m, m):
            raise ValueError(f"S and C_bin must be square and equal-sized, got {self.S.shape}, {self.C_bin.shape}")
        if not np.array_equal(self.S, self.S.T):
            raise ValueError("S must be symmetric")
        if not np.array_equal(np.diag(self.S), np.ones(m)):
            raise ValueError("S diagonal must be exactly 1")
        if self.S.min() < 0.0 or self.S.max() > 1.0:
            raise ValueError("S entries must lie in [0, 1]")
        if not np.array_equal(self.C_bin, (self.S >= self.alpha).astype(np.float64)):
            raise ValueError("C_bin must equal S >= alpha elementwise")
        if self.mode not in ("binary", "soft"):
            raise ValueError(f"unknown csm mode {self.mode!r}")


def channel_sparsity(features: np.ndarray, eps: float = NONZERO_EPS) -> np.ndarray:
    """Per-channel fraction of non-responding positions, 1 - Q_c.

    ``features`` is one sample's post-activation map (T, C, H, W); Q_c counts
    entries above eps over the T*H*W positions of channel c.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 4:
        raise ValueError(f"features must be (T, C, H, W), got shape {f.shape}")
    t, c, h, w = f.shape
    if t * h * w == 0:
        raise ValueError(f"empty spatiotemporal extent in shape {f.shape}")
    if f.min() < 0.0:
        raise ValueError("features must be nonnegative (post-activation)")
    q = (f > eps).sum(axis=(0, 2, 3)) / float(t * h * w)
    return 1.0 - q


def category_signatures(
    features_per_sample: list[np.ndarray], labels, num_classes: int
) -> list[SparsitySignature]:
    """Arithmetic mean of per-sample sparsity vectors within each class."""
    labels = np.asarray(labels)
    if len(features_per_sample) != labels.shape[0]:
        raise ValueError("features and labels disagree on sample count")
    sums: list[np.ndarray | None] = [None] * num_classes
    counts = np.zeros(num_classes, dtype=int)
    for feats, label in zip(features_per_sample, labels):
        xi = channel_sparsity(feats)
        m = int(label)
        if not 0 <= m < num_classes:
            raise ValueError(f"label {m} out of range [0, {num_classes})")
        sums[m] = xi if sums[m] is None else sums[m] + xi
        counts[m] += 1
    out = []
    for m in range(num_classes):
        if counts[m] == 0:
            raise ValueError(f"class {m} has no samples")
        out.append(
            SparsitySignature(per_channel=sums[m] / counts[m], category=m, support_count=int(counts[m]))
        )
    return out


def similarity_matrix(signatures: list[SparsitySignature], metric: str = "cosine") -> np.ndarray:
    """Pairwise signature similarity in [0, 1], symmetric with unit diagonal.

    The cosine of nonnegative vectors already lands in [0, 1]; the
    "euclidean" alternative uses 1 - ||a - b|| / sqrt(C). A zero-norm
    signature gets similarity 0 to every other class (warned).
    """
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown similarity metric {metric!r}")
    vectors = np.stack([np.asarray(s.per_channel, dtype=np.float64) for s in signatures])
    m, c = vectors.shape
    if m < 1:
        raise ValueError("need at least one signature")

    s = np.zeros((m, m))
    if metric == "cosine":
        norms = np.sqrt((vectors * vectors).sum(axis=1))
        dead = norms == 0.0
        if dead.any():
            logger.warning(
                "zero-norm sparsity signature for classes %s; their similarity is set to 0",
                np.flatnonzero(dead).tolist(),
            )
        safe = np.where(dead, 1.0, norms)
        for i in range(m):
            for j in range(i + 1, m):
                if dead[i] or dead[j]:
                    continue
                s[i, j] = float(vectors[i] @ vectors[j]) / (safe[i] * safe[j])
    else:
        span = np.sqrt(c)
        for i in range(m):
            for j in range(i + 1, m):
                s[i, j] = 1.0 - float(np.linalg.norm(vectors[i] - vectors[j])) / span
    s = np.clip(s, 0.0, 1.0)
    s = s + s.T
    np.fill_diagonal(s, 1.0)
    return s


def binarize_with_target_degree(S: np.ndarray, target_degree: float, mode: str = "binary") -> Csm:
    """Pick the smallest attained threshold whose mean off-diagonal degree
    stays at or below ``target_degree``; ties go to the larger alpha.

    If even the largest off-diagonal value (with its ties) blows the budget,
    alpha is placed halfway between that value and 1 and the matrix
    degenerates to the identity (reported via warning).
    """
    S = np.asarray(S, dtype=np.float64)
    m = S.shape[0]
    if not 1 <= target_degree < m:
        raise ValueError(f"target degree must lie in [1, {m}), got {target_degree}")
    off = S[~np.eye(m, dtype=bool)]
    budget = m * float(target_degree)

    alpha = None
    for value in np.unique(off)[::-1]:  # descending distinct off-diagonal values
        if (off >= value).sum() <= budget:
            alpha = float(value)
        else:
            break
    if alpha is None:
        top = float(off.max())
        alpha = (top + 1.0) / 2.0
        logger.warning(
            "degenerate similarity matrix: %d entries tie at the top value %.6g, exceeding the "
            "degree budget %.3g; alpha=%.6g forces the identity CSM",
            int((off >= top).sum()),
            top,
            budget / m,
            alpha,
        )
    csm = Csm(S=S, C_bin=(S >= alpha).astype(np.float64), alpha=alpha, mode=mode)
    csm.validate()
    return csm


def interclass_similarity_vector(S: np.ndarray) -> np.ndarray:
    """Min-max normalized off-diagonal row sums of S, one value per class."""
    S = np.asarray(S, dtype=np.float64)
    m = S.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 classes, got {m}")
    raw = S.sum(axis=1) - np.diag(S)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        logger.warning("interclass similarity sums are constant (%.6g); vector set to zeros", lo)
        return np.zeros(m)
    return (raw - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# JSON persistence so analysis runs can skip retraining


def csm_to_dict(csm: Csm, class_names: list[str]) -> dict:
    if len(class_names) != csm.num_classes:
        raise ValueError(
            f"{len(class_names)} class names for a {csm.num_classes}-class similarity matrix"
        )
    return {
        "alpha": csm.alpha,
        "mode": csm.mode,
        "S": [float(v) for v in csm.S.reshape(-1)],
        "C_bin": [float(v) for v in csm.C_bin.reshape(-1)],
        "class_names": list(class_names),
    }


def csm_from_dict(payload: dict) -> tuple[Csm, list[str]]:
    names = list(payload["class_names"])
    m = len(names)
    csm = Csm(
        S=np.array(payload["S"], dtype=np.float64).reshape(m, m),
        C_bin=np.array(payload["C_bin"], dtype=np.float64).reshape(m, m),
        alpha=float(payload["alpha"]),
        mode=str(payload["mode"]),
    )
    csm.validate()
    return csm, names


def save_csm(path, csm: Csm, class_names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(csm_to_dict(csm, class_names), fh, indent=1)
        fh.write("\n")


def load_csm(path) -> tuple[Csm, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return csm_from_dict(json.load(fh))
