"""Universal and category-specific branches over a shared bottom stack.

The bottom stack embeds each input position, mixes spatially through 2x2
average pooling, and is shared (by reference) between both branches. The two
top stacks have identical architecture with independent parameters. The mask
head (a per-position channel mixer from feature channels to classes) lives on
the model; mask generation itself is in the masknet module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    LayerSpec,
    Tensor,
    apply_layer,
    global_avg_pool,
    make_layer,
    masked_broadcast_mul,
    run_stack,
)

# branch codes keep per-layer init seeds disjoint
_BOTTOM, _UN_TOP, _CSN_TOP, _UN_HEAD, _CSN_HEAD, _MASK_HEAD = range(6)


PATCH_SIZE = 2  # input patch embedding size; with 2x2 pooling, features sit on a 4x input grid


@dataclass(frozen=True)
class ModelConfig:
    input_grid: tuple[int, int, int, int]  # (T, channels, H, W)
    embed_channels: int
    bottom_layers: int
    top_layers: int
    feature_channels: int
    num_classes: int
    seed: int

    def validate(self) -> None:
        t, ch, h, w = self.input_grid
        if min(t, ch, h, w) < 1:
            raise ValueError(f"input_grid extents must be positive, got {self.input_grid}")
        for name in ("embed_channels", "bottom_layers", "top_layers", "feature_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        stride = PATCH_SIZE * 2
        if h % stride != 0 or w % stride != 0:
            raise ValueError(
                f"H and W must be divisible by {stride} (patch embedding + 2x2 pooling), got ({h}, {w})"
            )
        if h // stride < 2 or w // stride < 2:
            raise ValueError(
                f"pooled feature map must be at least 2x2, got ({h // stride}, {w // stride})"
            )

    @property
    def feature_grid(self) -> tuple[int, int, int]:
        t, _, h, w = self.input_grid
        stride = PATCH_SIZE * 2
        return (t, h // stride, w // stride)

    @property
    def cell_stride(self) -> int:
        """Input pixels per feature-map cell along each spatial axis."""
        return PATCH_SIZE * 2


@dataclass
class U2sModel:
    config: ModelConfig
    shared_bottom: list[LayerSpec]
    un_top: list[LayerSpec]
    csn_top: list[LayerSpec]
    un_head: LayerSpec
    csn_head: LayerSpec
    mask_head: LayerSpec

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for stack_name, stack in (
            ("bottom", self.shared_bottom),
            ("un_top", self.un_top),
            ("csn_top", self.csn_top),
        ):
            for i, layer in enumerate(stack):
                if layer.weight is not None:
                    out[f"{stack_name}.{i}.weight"] = layer.weight
                    out[f"{stack_name}.{i}.bias"] = layer.bias
        for head_name, head in (
            ("un_head", self.un_head),
            ("csn_head", self.csn_head),
            ("mask_head", self.mask_head),
        ):
            out[f"{head_name}.weight"] = head.weight
            out[f"{head_name}.bias"] = head.bias
        return out

    def parameter_group(self, group: str) -> dict[str, Tensor]:
        """Name -> tensor map for 'universal', 'specific', or 'all'."""
        params = self.named_parameters()
        if group == "all":
            return params
        if group == "universal":
            keep = ("bottom.", "un_top.", "un_head.")
        elif group == "specific":
            keep = ("csn_top.", "csn_head.", "mask_head.")
        else:
            raise ValueError(f"unknown parameter group {group!r}")
        return {k: v for k, v in params.items() if k.startswith(keep)}


def layer_signature(stack: list[LayerSpec]) -> list[tuple[str, int, int]]:
    """Structural description (kind, in, out) per layer, for architecture checks."""
    return [(l.kind, l.in_channels, l.out_channels) for l in stack]


def init_model(config: ModelConfig) -> U2sModel:
    """Deterministic init: weights ~ N(0, 1/fan_in) from per-layer seeds, zero biases."""
    config.validate()
    _, channels, _, _ = config.input_grid
    seed = config.seed

    bottom: list[LayerSpec] = []
    c_in = channels * PATCH_SIZE * PATCH_SIZE  # patchified input, see patchify()
    for i in range(config.bottom_layers):
        bottom.append(
            make_layer("per_position_linear", c_in, config.embed_channels, seed=(seed, _BOTTOM, i))
        )
        bottom.append(make_layer("relu"))
        c_in = config.embed_channels
    bottom.append(make_layer("avg_pool_spatial"))

    def top_stack(code: int) -> list[LayerSpec]:
        layers: list[LayerSpec] = []
        cin = config.embed_channels
        for i in range(config.top_layers):
            layers.append(
                make_layer("per_position_linear", cin, config.feature_channels, seed=(seed, code, i))
            )
            layers.append(make_layer("relu"))
            cin = config.feature_channels
        return layers

    return U2sModel(
        config=config,
        shared_bottom=bottom,
        un_top=top_stack(_UN_TOP),
        csn_top=top_stack(_CSN_TOP),
        un_head=make_layer("dense", config.feature_channels, config.num_classes, seed=(seed, _UN_HEAD, 0)),
        csn_head=make_layer("dense", config.feature_channels, config.num_classes, seed=(seed, _CSN_HEAD, 0)),
        mask_head=make_layer(
            "per_position_linear", config.feature_channels, config.num_classes, seed=(seed, _MASK_HEAD, 0)
        ),
    )


def _check_batch(model: U2sModel, batch: np.ndarray) -> None:
    t, ch, h, w = model.config.input_grid
    if batch.ndim != 5 or batch.shape[1:] != (t, ch, h, w):
        raise ValueError(
            f"batch shape {batch.shape} does not match (N, {t}, {ch}, {h}, {w})"
        )


def patchify(batch: np.ndarray, patch: int = PATCH_SIZE) -> np.ndarray:
    """Fold each patch x patch spatial block into the channel axis.

    (N, T, C, H, W) -> (N, T, C*patch*patch, H/patch, W/patch); new channel
    index is c * patch^2 + dy * patch + dx. Applied to the constant input
    before the graph, so per-position layers see patch content, not just
    single-position values.
    """
    n, t, c, h, w = batch.shape
    x = batch.reshape(n, t, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 1, 2, 4, 6, 3, 5)
    return np.ascontiguousarray(x.reshape(n, t, c * patch * patch, h // patch, w // patch))


def forward_bottom(model: U2sModel, batch: np.ndarray) -> Tensor:
    _check_batch(model, batch)
    return run_stack(model.shared_bottom, Tensor(patchify(batch)))


def forward_universal_from(model: U2sModel, bottom_out: Tensor) -> tuple[Tensor, Tensor]:
    features = run_stack(model.un_top, bottom_out)
    logits = apply_layer(model.un_head, global_avg_pool(features))
    return features, logits


def forward_specific_from(model: U2sModel, bottom_out: Tensor, mask: Tensor) -> Tensor:
    gated = masked_specific_features(model, bottom_out, mask)
    return apply_layer(model.csn_head, global_avg_pool(gated))


def masked_specific_features(model: U2sModel, bottom_out: Tensor, mask: Tensor) -> Tensor:
    """CSN feature map after mask gating (pre-pooling), also used for sparsity analysis."""
    features = run_stack(model.csn_top, bottom_out)
    if mask.data.min() < 0.0 or mask.data.max() > 1.0:
        raise ValueError(
            f"mask values out of range [0, 1]: min={mask.data.min()}, max={mask.data.max()}"
        )
    return masked_broadcast_mul(features, mask)


def forward_universal(model: U2sModel, batch: np.ndarray) -> tuple[Tensor, Tensor]:
    """Features (N,T,C,H',W') and logits (N,M) of the universal branch."""
    return forward_universal_from(model, forward_bottom(model, batch))


def forward_specific(model: U2sModel, batch: np.ndarray, mask: Tensor) -> Tensor:
    """Logits of the category-specific branch under a [0,1] gating mask."""
    return forward_specific_from(model, forward_bottom(model, batch), mask)


def copy_parameters(model: U2sModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


def load_parameters(model: U2sModel, values: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    missing = sorted(set(params) - set(values))
    extra = sorted(set(values) - set(params))
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={missing}, unexpected={extra}")
    for name, p in params.items():
        arr = np.asarray(values[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match {p.data.shape}")
        p.data = arr.copy()
