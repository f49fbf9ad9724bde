"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the network branches, mask generation, losses, the
training loop) is assembled from the small op set defined here. Each op
records a vjp closure on its output; ``Tensor.backward`` replays the closures
in reverse topological order. Graph construction and backward are
single-threaded; tensors are treated as immutable once produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """An operand shape violates an op contract."""


class GraphError(RuntimeError):
    """Invalid backward call: non-scalar root or root detached from the graph."""


class Tensor:
    """N-dimensional float64 array, optionally tracked by the autodiff graph.

    ``data`` is stored C-contiguous (row-major). ``grad`` stays None until a
    backward pass reaches the tensor and always matches ``data``'s shape.
    Leaf tensors created with ``requires_grad=True`` are parameters; interior
    nodes inherit ``requires_grad`` from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_vjp")

    def __init__(self, data, requires_grad=False, name=None, _prev=(), _vjp=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev = _prev
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, params=None) -> None:
        """Backpropagate from this scalar through every reachable node.

        When ``params`` is given, parameters the graph never reached get an
        exact zero gradient instead of None.
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward root is detached from every differentiable leaf")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is not None:
                node._vjp(node.grad)

        if params is not None:
            values = params.values() if isinstance(params, dict) else params
            for p in values:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    def __rmul__(self, k: float) -> "Tensor":
        return scale(self, k)

    def __repr__(self) -> str:
        tag = self.name or ("param" if self._vjp is None and self.requires_grad else "node")
        return f"Tensor({tag}, shape={self.shape})"


def zero_grad(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def _node(data, parents, vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _expect_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _expect_same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), None)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out._vjp = vjp if out.requires_grad else None
    return out


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = _node(a.data * k, (a,), None)

    def vjp(g):
        a._accumulate(k * g)

    out._vjp = vjp if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _expect_same_shape(a, b, "mul")
    out = _node(a.data * b.data, (a, b), None)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(b.data * g)
        if b.requires_grad:
            b._accumulate(a.data * g)

    out._vjp = vjp if out.requires_grad else None
    return out


def tsum(a: Tensor) -> Tensor:
    out = _node(a.data.sum(), (a,), None)

    def vjp(g):
        a._accumulate(np.full_like(a.data, g.item()))

    out._vjp = vjp if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    out = _node(np.maximum(a.data, 0.0), (a,), None)

    def vjp(g):
        # subgradient at exactly 0 is 0, which keeps gradient checks deterministic
        a._accumulate(g * (a.data > 0.0))

    out._vjp = vjp if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = _node(s, (a,), None)

    def vjp(g):
        a._accumulate(g * s * (1.0 - s))

    out._vjp = vjp if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# structured ops on (N, T, C, H, W) feature maps


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"dense: input must be 2-d (batch, channels), got {x.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeMismatch(
            f"dense: channel axis (axis 1) is {x.data.shape[1]}, weight expects {weight.data.shape[0]}"
        )
    out = _node(x.data @ weight.data + bias.data, (x, weight, bias), None)

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    out._vjp = vjp if out.requires_grad else None
    return out


def per_position_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Apply one channel-mixing matrix independently at every (t, h, w) position."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"per_position_linear: input must be 5-d (N,T,C,H,W), got {x.shape}")
    c_in = weight.data.shape[0]
    if x.data.shape[2] != c_in:
        raise ShapeMismatch(
            f"per_position_linear: channel axis (axis 2) is {x.data.shape[2]}, weight expects {c_in}"
        )
    y = np.tensordot(x.data, weight.data, axes=([2], [0]))  # (N,T,H,W,M)
    y = np.ascontiguousarray(np.moveaxis(y, 4, 2))
    y += bias.data[None, None, :, None, None]
    out = _node(y, (x, weight, bias), None)

    def vjp(g):
        if x.requires_grad:
            gx = np.tensordot(g, weight.data, axes=([2], [1]))  # (N,T,H,W,C)
            x._accumulate(np.moveaxis(gx, 4, 2))
        if weight.requires_grad:
            xm = np.moveaxis(x.data, 2, 4).reshape(-1, c_in)
            gm = np.moveaxis(g, 2, 4).reshape(-1, weight.data.shape[1])
            weight._accumulate(xm.T @ gm)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1, 3, 4)))

    out._vjp = vjp if out.requires_grad else None
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the T, H, W axes: (N,T,C,H,W) -> (N,C)."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"global_avg_pool: input must be 5-d (N,T,C,H,W), got {x.shape}")
    n, t, c, h, w = x.data.shape
    out = _node(x.data.mean(axis=(1, 3, 4)), (x,), None)

    def vjp(g):
        x._accumulate(np.broadcast_to(g[:, None, :, None, None] / (t * h * w), x.data.shape))

    out._vjp = vjp if out.requires_grad else None
    return out


def avg_pool_spatial(x: Tensor) -> Tensor:
    """2x2 spatial mean pooling with stride 2; H and W must be even."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"avg_pool_spatial: input must be 5-d (N,T,C,H,W), got {x.shape}")
    n, t, c, h, w = x.data.shape
    if h % 2 != 0:
        raise ShapeMismatch(f"avg_pool_spatial: height axis (axis 3) is {h}, must be even")
    if w % 2 != 0:
        raise ShapeMismatch(f"avg_pool_spatial: width axis (axis 4) is {w}, must be even")
    y = x.data.reshape(n, t, c, h // 2, 2, w // 2, 2).mean(axis=(4, 6))
    out = _node(y, (x,), None)

    def vjp(g):
        gx = np.broadcast_to(
            g[:, :, :, :, None, :, None] / 4.0, (n, t, c, h // 2, 2, w // 2, 2)
        ).reshape(n, t, c, h, w)
        x._accumulate(gx)

    out._vjp = vjp if out.requires_grad else None
    return out


def masked_broadcast_mul(x: Tensor, mask: Tensor) -> Tensor:
    """Gate features with a single-channel mask broadcast across channels."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"masked_broadcast_mul: features must be 5-d, got {x.shape}")
    if mask.data.ndim != 5:
        raise ShapeMismatch(f"masked_broadcast_mul: mask must be 5-d, got {mask.shape}")
    if mask.data.shape[2] != 1:
        raise ShapeMismatch(
            f"masked_broadcast_mul: mask channel axis (axis 2) is {mask.data.shape[2]}, must be 1"
        )
    for axis, label in ((0, "batch"), (1, "time"), (3, "height"), (4, "width")):
        if x.data.shape[axis] != mask.data.shape[axis]:
            raise ShapeMismatch(
                f"masked_broadcast_mul: {label} axis (axis {axis}) is {mask.data.shape[axis]} "
                f"on the mask but {x.data.shape[axis]} on the features"
            )
    out = _node(x.data * mask.data, (x, mask), None)

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * mask.data)
        if mask.requires_grad:
            mask._accumulate((g * x.data).sum(axis=2, keepdims=True))

    out._vjp = vjp if out.requires_grad else None
    return out


def channel_mix(x: Tensor, weights: np.ndarray) -> Tensor:
    """Per-sample weighted sum over the channel axis.

    ``weights`` is a constant (N, M) array; output is (N, T, 1, H, W) with
    out[n,t,0,h,w] = sum_m weights[n,m] * x[n,t,m,h,w].
    """
    if x.data.ndim != 5:
        raise ShapeMismatch(f"channel_mix: input must be 5-d, got {x.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.data.shape[0], x.data.shape[2]):
        raise ShapeMismatch(
            f"channel_mix: weights shape {w.shape} does not match (batch, channels) "
            f"= {(x.data.shape[0], x.data.shape[2])}"
        )
    y = np.einsum("nm,ntmhw->nthw", w, x.data)[:, :, None]
    out = _node(y, (x,), None)

    def vjp(g):
        x._accumulate(w[:, None, :, None, None] * g)

    out._vjp = vjp if out.requires_grad else None
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch plus the softmax probabilities.

    Stabilized by max subtraction, so saturated logits cannot overflow. The
    returned probabilities are a plain array detached from the graph.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    n, m = logits.data.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"softmax_cross_entropy: labels shape {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"label out of range [0, {m}): {int(labels[(labels < 0) | (labels >= m)][0])}")
    labels = labels.astype(np.intp)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    ez = np.exp(shifted)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    log_probs = shifted - np.log(denom)
    loss_value = -log_probs[np.arange(n), labels].mean()
    out = _node(np.float64(loss_value), (logits,), None)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(d * (g.item() / n))

    out._vjp = vjp if out.requires_grad else None
    return out, probs


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    ez = np.exp(z - z.max(axis=1, keepdims=True))
    return ez / ez.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# layers


PARAMETRIC_KINDS = ("dense", "per_position_linear")
LAYER_KINDS = PARAMETRIC_KINDS + (
    "relu",
    "sigmoid",
    "global_avg_pool",
    "masked_broadcast_mul",
    "avg_pool_spatial",
)


@dataclass
class WeightInit:
    seed: tuple[int, ...]
    scale: float


@dataclass
class LayerSpec:
    """One layer of a stack: a kind tag plus (for parametric kinds) its tensors."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    weight_init: WeightInit | None = None
    weight: Tensor | None = None
    bias: Tensor | None = None

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias] if self.weight is not None else []


def make_layer(kind: str, in_channels: int = 0, out_channels: int = 0, seed=0) -> LayerSpec:
    """Create a layer; parametric kinds draw weights ~ N(0, 1/fan_in), zero bias."""
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind not in PARAMETRIC_KINDS:
        return LayerSpec(kind=kind)
    if in_channels < 1 or out_channels < 1:
        raise ValueError(f"{kind}: channel counts must be >= 1, got {in_channels}x{out_channels}")
    seed_key = (seed,) if isinstance(seed, int) else tuple(int(s) for s in seed)
    scale = 1.0 / math.sqrt(in_channels)
    rng = np.random.default_rng(seed_key)
    weight = Tensor(rng.normal(0.0, scale, (in_channels, out_channels)), requires_grad=True)
    bias = Tensor(np.zeros(out_channels), requires_grad=True)
    return LayerSpec(
        kind=kind,
        in_channels=in_channels,
        out_channels=out_channels,
        weight_init=WeightInit(seed=seed_key, scale=scale),
        weight=weight,
        bias=bias,
    )


def apply_layer(layer: LayerSpec, x: Tensor, aux: Tensor | None = None) -> Tensor:
    kind = layer.kind
    if kind == "dense":
        return dense(x, layer.weight, layer.bias)
    if kind == "per_position_linear":
        return per_position_linear(x, layer.weight, layer.bias)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "avg_pool_spatial":
        return avg_pool_spatial(x)
    if kind == "masked_broadcast_mul":
        if aux is None:
            raise ShapeMismatch("masked_broadcast_mul: aux mask tensor is required")
        return masked_broadcast_mul(x, aux)
    raise ValueError(f"unknown layer kind {kind!r}")


def run_stack(layers, x: Tensor) -> Tensor:
    for layer in layers:
        x = apply_layer(layer, x)
    return x


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Plain SGD-with-momentum state; velocities are keyed by parameter name."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Weight decay is folded into the gradient before the momentum update
    (classic formulation). Parameters with no gradient are treated as grad 0.
    """
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeMismatch(f"sgd_step: grad shape {g.shape} != param shape {p.data.shape} ({name})")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeMismatch(f"sgd_step: velocity shape {v.shape} != param shape {p.data.shape} ({name})")
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v


# ---------------------------------------------------------------------------
# finite-difference oracle


def check_gradients(loss_fn, params, eps: float = 1e-4) -> float:
    """Max relative error between backward() and central finite differences.

    ``loss_fn`` must rebuild the loss graph from the parameters' current
    values; every coordinate of every parameter is perturbed by +-eps. The
    relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    zero_grad(plist)
    loss = loss_fn()
    loss.backward(params=plist)
    analytic = [p.grad.copy() for p in plist]

    worst = 0.0
    for p, grads in zip(plist, analytic):
        flat = p.data.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = loss_fn().item()
            flat[i] = orig - eps
            f_lo = loss_fn().item()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            denom = max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
