"""Three-stage training protocol, the combined loss, prediction fusion,
and metric computation.

Stage 1 trains the universal branch alone. The similarity matrix is then
computed once from the trained universal features and frozen. Stage 2 trains
the mask head and the category-specific branch against that frozen matrix
with the universal branch untouched; the joint stage unfreezes everything at
a lower learning rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .autodiff import (
    OptimizerState,
    Tensor,
    sgd_step,
    softmax_cross_entropy,
    stable_softmax,
    zero_grad,
)
from .csm import Csm, binarize_with_target_degree, category_signatures, similarity_matrix
from .data import Sample, SamplingPlan, iterate_minibatches, stack_batch
from .masknet import (
    bridge_logits,
    category_regularizer,
    combine_masks_for_prediction,
    generate_category_masks,
)

logger = logging.getLogger(__name__)

STAGE_UNIVERSAL = "universal_only"
STAGE_SPECIFIC = "mask_and_specific"
STAGE_JOINT = "joint"
STAGES = (STAGE_UNIVERSAL, STAGE_SPECIFIC, STAGE_JOINT)

HEADS = ("universal", "bridge", "specific")

# seed-stream tags so shuffling, frame picks, and init never collide
_SHUFFLE, _FRAMES = 11, 13


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite during training."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    joint_epochs: int = 10
    stage_lr: float = 1e-3
    joint_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    reg_lambda: float = 0.5
    target_degree: float = 1.0
    csm_mode: str = "binary"  # binary | soft | simple (mask selection behavior)
    csm_metric: str = "cosine"
    weight_similarity: str = "affine_cos"
    fusion_set: tuple[str, ...] = HEADS
    fusion_space: str = "probs"  # probs | logits
    plateau_patience: int = 3
    lr_decay_factor: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("stage1_epochs", "stage2_epochs", "joint_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stage_lr <= 0 or self.joint_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be nonnegative, got {self.reg_lambda}")
        if self.csm_mode not in ("binary", "soft", "simple"):
            raise ValueError(f"unknown csm_mode {self.csm_mode!r}")
        if not self.fusion_set:
            raise ValueError("fusion_set must not be empty")
        for head in self.fusion_set:
            if head not in HEADS:
                raise ValueError(f"unknown fusion head {head!r}")
        if self.fusion_space not in ("probs", "logits"):
            raise ValueError(f"unknown fusion_space {self.fusion_space!r}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must exceed 1, got {self.lr_decay_factor}")


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class_top1: np.ndarray
    confusion: np.ndarray
    losses: dict[str, float] = field(default_factory=dict)


def total_loss(l_u: Tensor, l_c: Tensor, l_m: Tensor, w_regular: Tensor, reg_lambda: float) -> Tensor:
    """The end-to-end objective: l_u + l_c + l_m + lambda * w_regular."""
    components = {"L_U": l_u, "L_C": l_c, "L_M": l_m, "w_regular": w_regular}
    for name, tensor in components.items():
        if not np.isfinite(tensor.data).all():
            raise NonFiniteLossError(f"loss component {name} is not finite: {tensor.data}")
    return l_u + l_c + l_m + reg_lambda * w_regular


def fuse_predictions(prob_sets: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of softmax probability rows across heads."""
    if not prob_sets:
        raise ValueError("empty fusion set")
    first = prob_sets[0]
    for p in prob_sets[1:]:
        if p.shape != first.shape:
            raise ValueError(f"probability shapes differ: {p.shape} vs {first.shape}")
    return np.mean(prob_sets, axis=0)


def evaluate_metrics(probs: np.ndarray, labels) -> EvalReport:
    """Top-1/top-5, per-class accuracy, and the confusion matrix.

    Ties rank the lower class index first, so uniform rows predict class 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, m = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"label out of range [0, {m})")
    labels = labels.astype(np.intp)

    order = np.argsort(-probs, axis=1, kind="stable")
    k = min(5, m)
    top1_hits = order[:, 0] == labels
    topk_hits = (order[:, :k] == labels[:, None]).any(axis=1)

    per_class = np.zeros(m)
    confusion = np.zeros((m, m), dtype=np.int64)
    for cls in range(m):
        rows = labels == cls
        if rows.any():
            per_class[cls] = top1_hits[rows].mean()
    np.add.at(confusion, (labels, order[:, 0]), 1)

    return EvalReport(
        top1=float(top1_hits.mean()),
        top5=float(topk_hits.mean()),
        per_class_top1=per_class,
        confusion=confusion,
    )


# ---------------------------------------------------------------------------
# forward helpers shared by training, evaluation, and the exporters


def head_logits(model: nets.U2sModel, batch: np.ndarray, csm: Csm | None, csm_mode: str):
    """Logits per head for one batch; 'specific' and 'bridge' need the model's
    mask head, 'specific' additionally needs a frozen similarity matrix."""
    bottom = nets.forward_bottom(model, batch)
    features, un_logits = nets.forward_universal_from(model, bottom)
    out = {"universal": un_logits.data}
    masks = generate_category_masks(features, model.mask_head)
    out["bridge"] = bridge_logits(masks).data
    if csm is not None:
        predicted = np.argmax(un_logits.data, axis=1)
        mask = combine_masks_for_prediction(masks, predicted, csm, mode=csm_mode)
        out["specific"] = nets.forward_specific_from(model, bottom, mask).data
    return out


def head_probabilities(
    model: nets.U2sModel,
    inputs: np.ndarray,
    csm: Csm | None,
    csm_mode: str = "binary",
    batch_size: int = 64,
) -> dict[str, np.ndarray]:
    """Softmax probabilities per head over a full dataset array."""
    chunks: dict[str, list[np.ndarray]] = {}
    for start in range(0, inputs.shape[0], batch_size):
        logits = head_logits(model, inputs[start : start + batch_size], csm, csm_mode)
        for name, values in logits.items():
            chunks.setdefault(name, []).append(stable_softmax(values))
    return {name: np.concatenate(parts) for name, parts in chunks.items()}


def fused_probabilities(
    probs_by_head: dict[str, np.ndarray], fusion_set, fusion_space: str = "probs"
) -> np.ndarray:
    missing = [h for h in fusion_set if h not in probs_by_head]
    if missing:
        raise ValueError(f"fusion heads {missing} are not available")
    if fusion_space == "probs":
        return fuse_predictions([probs_by_head[h] for h in fusion_set])
    # logits alternative: average log-probabilities, then renormalize
    stacked = np.mean([np.log(np.maximum(probs_by_head[h], 1e-300)) for h in fusion_set], axis=0)
    return stable_softmax(stacked)


def compute_csm(
    model: nets.U2sModel,
    train_samples: list[Sample],
    config: TrainConfig,
    batch_size: int = 64,
) -> Csm:
    """Frozen similarity matrix from the trained universal branch's features."""
    plan = SamplingPlan(num_segments=model.config.input_grid[0], mode="test_fixed")
    features: list[np.ndarray] = []
    labels: list[int] = []
    indices = np.arange(len(train_samples))
    for start in range(0, len(indices), batch_size):
        batch_idx = indices[start : start + batch_size]
        inputs, batch_labels = stack_batch(train_samples, batch_idx, plan=plan, rng=None)
        feats, _ = nets.forward_universal(model, inputs)
        features.extend(feats.data[i] for i in range(feats.data.shape[0]))
        labels.extend(int(l) for l in batch_labels)
    signatures = category_signatures(features, labels, model.config.num_classes)
    S = similarity_matrix(signatures, metric=config.csm_metric)
    mode = "soft" if config.csm_mode == "soft" else "binary"
    return binarize_with_target_degree(S, config.target_degree, mode=mode)


# ---------------------------------------------------------------------------
# the stage loop


def _stage_params(model: nets.U2sModel, stage: str) -> dict[str, Tensor]:
    if stage == STAGE_UNIVERSAL:
        return model.parameter_group("universal")
    if stage == STAGE_SPECIFIC:
        return model.parameter_group("specific")
    if stage == STAGE_JOINT:
        return model.parameter_group("all")
    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


def _set_trainable(model: nets.U2sModel, trainable: dict[str, Tensor]) -> None:
    for name, p in model.named_parameters().items():
        p.requires_grad = name in trainable


def train_stage(
    model: nets.U2sModel,
    train_samples: list[Sample],
    val_samples: list[Sample],
    config: TrainConfig,
    stage: str,
    csm: Csm | None = None,
) -> list[dict]:
    """Run one stage in place and return one history record per epoch.

    Frozen parameters never enter the graph, so stage 1 leaves the specific
    branch bit-identical and stage 2 leaves the universal branch bit-identical.
    """
    config.validate()
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    stage_index = STAGES.index(stage)
    trainable = _stage_params(model, stage)
    if stage != STAGE_UNIVERSAL and csm is None:
        raise ValueError(f"stage {stage} requires a frozen CSM; run stage 1 and compute_csm first")

    epochs = (config.stage1_epochs, config.stage2_epochs, config.joint_epochs)[stage_index]
    lr = config.joint_lr if stage == STAGE_JOINT else config.stage_lr
    opt = OptimizerState(
        learning_rate=lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    _set_trainable(model, trainable)

    segments = model.config.input_grid[0]
    train_plan = SamplingPlan(num_segments=segments, mode="train_random")
    val_plan = SamplingPlan(num_segments=segments, mode="test_fixed")
    val_inputs, val_labels = stack_batch(
        val_samples, np.arange(len(val_samples)), plan=val_plan, rng=None
    )

    history: list[dict] = []
    best_val = -np.inf
    stall = 0
    for epoch in range(epochs):
        frame_rng = np.random.default_rng((config.seed, stage_index, epoch, _FRAMES))
        shuffle_seed = (config.seed, stage_index, epoch, _SHUFFLE)
        sums = {"L_U": 0.0, "L_C": 0.0, "L_M": 0.0, "w_regular": 0.0}
        train_hits = 0
        batches = 0

        for batch_idx in iterate_minibatches(train_samples, config.batch_size, shuffle_seed):
            inputs, labels = stack_batch(train_samples, batch_idx, plan=train_plan, rng=frame_rng)
            bottom = nets.forward_bottom(model, inputs)
            features, un_logits = nets.forward_universal_from(model, bottom)
            l_u, probs_u = softmax_cross_entropy(un_logits, labels)
            train_hits += int((np.argmax(probs_u, axis=1) == labels).sum())

            if stage == STAGE_UNIVERSAL:
                loss = l_u
                record = {"L_U": l_u.item(), "L_C": None, "L_M": None, "w_regular": None}
            else:
                masks = generate_category_masks(features, model.mask_head)
                l_m, _ = softmax_cross_entropy(bridge_logits(masks), labels)
                predicted = np.argmax(probs_u, axis=1)
                combined = combine_masks_for_prediction(masks, predicted, csm, mode=config.csm_mode)
                csn_logits = nets.forward_specific_from(model, bottom, combined)
                l_c, _ = softmax_cross_entropy(csn_logits, labels)
                w_reg = category_regularizer(model.mask_head, csm, kind=config.weight_similarity)
                if stage == STAGE_SPECIFIC:
                    for name, tensor in (("L_C", l_c), ("L_M", l_m), ("w_regular", w_reg)):
                        if not np.isfinite(tensor.data).all():
                            raise NonFiniteLossError(f"loss component {name} is not finite")
                    loss = l_c + l_m + config.reg_lambda * w_reg
                else:
                    loss = total_loss(l_u, l_c, l_m, w_reg, config.reg_lambda)
                record = {
                    "L_U": l_u.item(),
                    "L_C": l_c.item(),
                    "L_M": l_m.item(),
                    "w_regular": w_reg.item(),
                }

            zero_grad(trainable)
            loss.backward(params=trainable)
            sgd_step(trainable, opt)

            for key, value in record.items():
                if value is not None:
                    sums[key] += value
            batches += 1

        val_report = _stage_eval(model, val_inputs, val_labels, config, stage, csm)
        entry = {
            "stage": stage,
            "epoch": epoch,
            "lr": opt.learning_rate,
            "train_top1": train_hits / len(train_samples),
            "val_top1": val_report.top1,
            "val_top5": val_report.top5,
        }
        for key in ("L_U", "L_C", "L_M", "w_regular"):
            tracked = stage != STAGE_UNIVERSAL or key == "L_U"
            entry[key] = sums[key] / batches if tracked else None
        history.append(entry)

        if val_report.top1 > best_val:
            best_val = val_report.top1
            stall = 0
        else:
            stall += 1
            if stall >= config.plateau_patience:
                opt.learning_rate /= config.lr_decay_factor
                stall = 0
                logger.info(
                    "%s epoch %d: validation plateau, lr decayed to %g",
                    stage,
                    epoch,
                    opt.learning_rate,
                )
    return history


def _stage_eval(
    model: nets.U2sModel,
    val_inputs: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
    stage: str,
    csm: Csm | None,
) -> EvalReport:
    probs = head_probabilities(model, val_inputs, csm if stage != STAGE_UNIVERSAL else None,
                               csm_mode=config.csm_mode)
    if stage == STAGE_UNIVERSAL:
        fused = probs["universal"]
    else:
        fused = fused_probabilities(probs, config.fusion_set, config.fusion_space)
    return evaluate_metrics(fused, val_labels)


# ---------------------------------------------------------------------------
# whole-protocol driver


@dataclass
class PipelineResult:
    model: nets.U2sModel
    one_pass_params: dict[str, np.ndarray]
    csm: Csm
    history: list[dict]


def run_pipeline(
    model_config: nets.ModelConfig,
    train_config: TrainConfig,
    train_samples: list[Sample],
    val_samples: list[Sample],
) -> PipelineResult:
    """Stage 1, frozen CSM, stage 2, joint stage; returns the final model plus
    a snapshot of the stage-1 (one-pass) parameters."""
    model = nets.init_model(model_config)
    history = train_stage(model, train_samples, val_samples, train_config, STAGE_UNIVERSAL)
    one_pass = nets.copy_parameters(model)
    csm = compute_csm(model, train_samples, train_config)
    history += train_stage(model, train_samples, val_samples, train_config, STAGE_SPECIFIC, csm=csm)
    history += train_stage(model, train_samples, val_samples, train_config, STAGE_JOINT, csm=csm)
    return PipelineResult(model=model, one_pass_params=one_pass, csm=csm, history=history)


def evaluation_inputs(samples: list[Sample], segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-frame (inputs, labels) arrays for deterministic evaluation."""
    plan = SamplingPlan(num_segments=segments, mode="test_fixed")
    return stack_batch(samples, np.arange(len(samples)), plan=plan, rng=None)
