"""Network assembly: bottleneck blocks, dense blocks, transitions, classifier.

Parameters live in a flat ``name -> ndarray`` map whose key set is a pure
function of the ``NetworkSpec``. The naming scheme
(``block{i}.bottleneck{j}.conv1.weight``, ``transition{i}.bn.gamma``,
``head.bn.beta``, ``fc.weight`` ...) is the public contract consumed by the
checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, DimensionError
from .tensor import FLOAT32, Rng, concat_channels, slice_channels

BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")


@dataclass
class NetworkSpec:
    """Declarative description of the dense network's block layout."""

    depth_n: int = 40
    growth_k: int = 12
    num_blocks: int = 3
    compression_theta: float = 0.5
    init_channels: int | None = None  # default 2*growth_k
    bottleneck_width: int | None = None  # default 4*growth_k
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    positive_init: bool = False  # weights from (0, 1/sqrt(fan_in)) instead of symmetric
    unit_uniform_init: bool = False  # raw U(0,1) weights, no fan-in scaling

    def __post_init__(self):
        if self.init_channels is None:
            self.init_channels = 2 * self.growth_k
        if self.bottleneck_width is None:
            self.bottleneck_width = 4 * self.growth_k
        if not 0.0 < self.compression_theta <= 1.0:
            raise ConfigError(f"compression_theta must be in (0, 1], got {self.compression_theta}")
        if self.growth_k < 1:
            raise ConfigError(f"growth_k must be >= 1, got {self.growth_k}")
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        nbl_per_block(self.depth_n)  # validates depth arithmetic


def nbl_per_block(n: int) -> int:
    """Bottleneck blocks per dense block for a network of n layers."""
    if n < 10:
        raise ConfigError(f"depth must be >= 10, got {n}")
    q = (n - 4) // 3
    if q % 2 != 0:
        raise ConfigError(
            f"depth n={n} is invalid: floor((n-4)/3)={q} is odd and cannot be halved"
        )
    return q // 2


def nbl_input_channels(spec: NetworkSpec, block_channels: int, j: int) -> int:
    """Channels consumed by the j-th (0-based) bottleneck of a block."""
    return block_channels + j * spec.growth_k


def channel_trace(spec: NetworkSpec) -> list[int]:
    """Channel counts [stem out, block1 out, trans1 out, ..., last block out]."""
    nbl = nbl_per_block(spec.depth_n)
    trace = [spec.init_channels]
    c = spec.init_channels
    for i in range(spec.num_blocks):
        c = c + nbl * spec.growth_k
        trace.append(c)
        if i < spec.num_blocks - 1:
            c = int(spec.compression_theta * c)
            if c < 1:
                raise ConfigError("compression reduced a transition to zero channels")
            trace.append(c)
    return trace


def parameter_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every parameter the spec generates."""
    nbl = nbl_per_block(spec.depth_n)
    bw = spec.bottleneck_width
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def bn(prefix: str, c: int):
        for f in BN_FIELDS:
            shapes.append((f"{prefix}.{f}", (c,)))

    shapes.append(("stem.weight", (spec.init_channels, spec.in_channels, 3, 3)))
    c = spec.init_channels
    for i in range(1, spec.num_blocks + 1):
        for j in range(1, nbl + 1):
            cin = nbl_input_channels(spec, c, j - 1)
            p = f"block{i}.bottleneck{j}"
            bn(f"{p}.bn1", cin)
            shapes.append((f"{p}.conv1.weight", (bw, cin, 1, 1)))
            bn(f"{p}.bn2", bw)
            shapes.append((f"{p}.conv2.weight", (spec.growth_k, bw, 3, 3)))
        c = c + nbl * spec.growth_k
        if i < spec.num_blocks:
            bn(f"transition{i}.bn", c)
            c_out = int(spec.compression_theta * c)
            shapes.append((f"transition{i}.conv.weight", (c_out, c, 1, 1)))
            c = c_out
    bn("head.bn", c)
    shapes.append(("fc.weight", (c, spec.num_classes)))
    shapes.append(("fc.bias", (spec.num_classes,)))
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def trainable_names(params: dict[str, np.ndarray]) -> list[str]:
    return [n for n in params if is_trainable(n)]


def build(spec: NetworkSpec, rng: Rng, dtype=FLOAT32) -> dict[str, np.ndarray]:
    """Allocate and initialize every parameter tensor.

    Weights default to symmetric uniform draws on (-1/sqrt(fan_in),
    1/sqrt(fan_in)): the fan-in scaling keeps activations bounded through a
    forty-layer stack, and the zero centering keeps the channels of a fresh
    network from all computing near-identical positive averages, which stalls
    SGD at the reference learning rate for hundreds of epochs. Two fidelity
    modes are available for experiments: ``spec.positive_init`` draws from
    (0, 1/sqrt(fan_in)) and ``spec.unit_uniform_init`` from raw U(0,1). BN
    starts as the identity map, the FC bias at zero. Deterministic given the
    rng's seed.
    """
    init_rng = rng.derive("init")
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(spec):
        if name.endswith(("gamma", "running_var")):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(("beta", "running_mean", "bias")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[0] if name == "fc.weight" else int(np.prod(shape[1:]))
            scale = 1.0 if spec.unit_uniform_init else 1.0 / np.sqrt(fan_in)
            lo = 0.0 if (spec.unit_uniform_init or spec.positive_init) else -scale
            params[name] = init_rng.uniform(lo, scale, size=shape).astype(dtype)
    return params


def param_count(spec: NetworkSpec) -> int:
    """Total trainable scalar count."""
    return sum(
        int(np.prod(shape)) for name, shape in parameter_shapes(spec) if is_trainable(name)
    )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class BottleneckCaches:
    bn1: nn.BnCache
    relu1: nn.ReluCache
    conv1: nn.ConvCache
    bn2: nn.BnCache
    relu2: nn.ReluCache
    conv2: nn.ConvCache


@dataclass
class TransitionCaches:
    bn: nn.BnCache
    relu: nn.ReluCache
    conv: nn.ConvCache
    pool: nn.AvgPoolCache


@dataclass
class HeadCaches:
    bn: nn.BnCache
    relu: nn.ReluCache
    gap: nn.GapCache
    drop: nn.DropoutCache
    fc: nn.LinearCache


@dataclass
class ForwardCaches:
    mode: str
    stem: nn.ConvCache
    blocks: list[list[BottleneckCaches]] = field(default_factory=list)
    transitions: list[TransitionCaches] = field(default_factory=list)
    head: HeadCaches | None = None
    channel_trace: list[int] = field(default_factory=list)


def _bn_params(spec: NetworkSpec, params: dict[str, np.ndarray], prefix: str) -> nn.BatchNormParams:
    return nn.BatchNormParams(
        gamma=params[f"{prefix}.gamma"],
        beta=params[f"{prefix}.beta"],
        running_mean=params[f"{prefix}.running_mean"],
        running_var=params[f"{prefix}.running_var"],
        eps=spec.bn_eps,
        momentum_bn=spec.bn_momentum,
    )


def _bottleneck_forward(spec, params, prefix, x, mode):
    h, bn1 = nn.batchnorm_forward(x, _bn_params(spec, params, f"{prefix}.bn1"), mode)
    h, relu1 = nn.relu(h)
    h, conv1 = nn.conv2d_forward(h, params[f"{prefix}.conv1.weight"], stride=1, pad=0)
    h, bn2 = nn.batchnorm_forward(h, _bn_params(spec, params, f"{prefix}.bn2"), mode)
    h, relu2 = nn.relu(h)
    h, conv2 = nn.conv2d_forward(h, params[f"{prefix}.conv2.weight"], stride=1, pad=1)
    return h, BottleneckCaches(bn1, relu1, conv1, bn2, relu2, conv2)


def _bottleneck_backward(caches: BottleneckCaches, prefix: str, grad, grads):
    grad, gw2 = nn.conv2d_backward(caches.conv2, grad)
    grads[f"{prefix}.conv2.weight"] = gw2
    grad = nn.relu_backward(caches.relu2, grad)
    grad, gg, gb = nn.batchnorm_backward(caches.bn2, grad)
    grads[f"{prefix}.bn2.gamma"] = gg
    grads[f"{prefix}.bn2.beta"] = gb
    grad, gw1 = nn.conv2d_backward(caches.conv1, grad)
    grads[f"{prefix}.conv1.weight"] = gw1
    grad = nn.relu_backward(caches.relu1, grad)
    grad, gg, gb = nn.batchnorm_backward(caches.bn1, grad)
    grads[f"{prefix}.bn1.gamma"] = gg
    grads[f"{prefix}.bn1.beta"] = gb
    return grad


def forward(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    x: np.ndarray,
    mode: str = "infer",
    rng: Rng | None = None,
    dropout_p: float = 0.0,
) -> tuple[np.ndarray, ForwardCaches]:
    """Run the network; returns raw logits [N, num_classes] plus caches.

    The caller applies softmax (or a loss). Train mode updates BN running
    statistics in place and applies dropout after global average pooling.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2] != spec.image_size or x.shape[3] != spec.image_size:
        raise DimensionError(
            f"input must be [N,{spec.in_channels},{spec.image_size},{spec.image_size}], got {x.shape}"
        )
    nbl = nbl_per_block(spec.depth_n)

    h, stem_cache = nn.conv2d_forward(x, params["stem.weight"], stride=1, pad=1)
    caches = ForwardCaches(mode=mode, stem=stem_cache)
    caches.channel_trace.append(h.shape[1])
    for i in range(1, spec.num_blocks + 1):
        block_caches = []
        for j in range(1, nbl + 1):
            new, bc = _bottleneck_forward(spec, params, f"block{i}.bottleneck{j}", h, mode)
            block_caches.append(bc)
            h = concat_channels([h, new])
        caches.blocks.append(block_caches)
        caches.channel_trace.append(h.shape[1])
        if i < spec.num_blocks:
            p = f"transition{i}"
            t, bn = nn.batchnorm_forward(h, _bn_params(spec, params, f"{p}.bn"), mode)
            t, rl = nn.relu(t)
            t, cv = nn.conv2d_forward(t, params[f"{p}.conv.weight"], stride=1, pad=0)
            h, pl = nn.avgpool2d(t)
            caches.transitions.append(TransitionCaches(bn, rl, cv, pl))
            caches.channel_trace.append(h.shape[1])

    h, bn = nn.batchnorm_forward(h, _bn_params(spec, params, "head.bn"), mode)
    h, rl = nn.relu(h)
    feats, gap = nn.global_avgpool(h)
    drop_rng = rng.derive("dropout") if (rng is not None and mode == "train") else rng
    feats, dp = nn.dropout(feats, dropout_p if mode == "train" else 0.0, mode, drop_rng)
    logits, fc = nn.linear(feats, params["fc.weight"], params["fc.bias"])
    caches.head = HeadCaches(bn, rl, gap, dp, fc)
    return logits, caches


def backward(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    caches: ForwardCaches,
    grad_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients w.r.t. every trainable parameter (running stats excluded)."""
    if caches.mode != "train":
        raise ContractError("backward needs caches from a train-mode forward")
    if caches.head is None:
        raise ContractError("incomplete forward caches")
    nbl = nbl_per_block(spec.depth_n)
    k = spec.growth_k
    grads: dict[str, np.ndarray] = {}

    grad, gw, gb = nn.linear_backward(caches.head.fc, grad_logits)
    grads["fc.weight"] = gw
    grads["fc.bias"] = gb
    grad = nn.dropout_backward(caches.head.drop, grad)
    grad = nn.global_avgpool_backward(caches.head.gap, grad)
    grad = nn.relu_backward(caches.head.relu, grad)
    grad, gg, gb = nn.batchnorm_backward(caches.head.bn, grad)
    grads["head.bn.gamma"] = gg
    grads["head.bn.beta"] = gb

    for i in range(spec.num_blocks, 0, -1):
        if i < spec.num_blocks:
            tc = caches.transitions[i - 1]
            grad = nn.avgpool2d_backward(tc.pool, grad)
            grad, gw = nn.conv2d_backward(tc.conv, grad)
            grads[f"transition{i}.conv.weight"] = gw
            grad = nn.relu_backward(tc.relu, grad)
            grad, gg, gb = nn.batchnorm_backward(tc.bn, grad)
            grads[f"transition{i}.bn.gamma"] = gg
            grads[f"transition{i}.bn.beta"] = gb
        for j in range(nbl, 0, -1):
            c_before = grad.shape[1] - k
            grad_new = slice_channels(grad, c_before, grad.shape[1])
            grad = slice_channels(grad, 0, c_before).copy()
            grad += _bottleneck_backward(
                caches.blocks[i - 1][j - 1], f"block{i}.bottleneck{j}", grad_new, grads
            )

    grad, gw = nn.conv2d_backward(caches.stem, grad)
    grads["stem.weight"] = gw
    return grads
