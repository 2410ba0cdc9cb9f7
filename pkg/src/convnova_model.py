"""
ConvNova Model

Stem convolution, a stack of Gated Convolution Blocks (GCBs) with a per-stage
dilation schedule, an MLP, and task heads. Also hosts the ablation variants
(single gate, additive without gate, U-Net style downsampling) and parameter
counting / width matching used to compare them at equal size.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DataFormatError, PreconditionError, ShapeError
from src.tensor_engine import (
    Rng,
    Tensor,
    add,
    affine,
    conv1d,
    conv1d_strided,
    gelu,
    hadamard,
    layer_norm,
    mean_pool,
    sigmoid,
    subtract,
    upsample_nearest,
)

logger = logging.getLogger(__name__)

VARIANTS = ("dual_branch", "single_gate", "additive", "unet_downsample")
HEADS = ("mlm", "sequence_class", "token_class")
ALPHABET_SIZE = 5
MLM_CLASSES = 4
INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Architecture description; the defaults give the 128-wide five-block backbone."""

    hidden_dim: int = 128
    n_gcb: int = 5
    stage_size: int = 5
    dilation_base: int = 4
    kernel_size: int = 9
    variant: str = "dual_branch"
    alphabet_size: int = ALPHABET_SIZE
    head: str = "mlm"
    n_classes: int = MLM_CLASSES
    stem_kernel_size: Optional[int] = None
    unet_depth: int = 2

    def __post_init__(self):
        if self.stem_kernel_size is None:
            self.stem_kernel_size = self.kernel_size
        for name in ("hidden_dim", "n_gcb", "stage_size", "dilation_base", "kernel_size",
                     "stem_kernel_size", "n_classes", "unet_depth"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.kernel_size % 2 == 0 or self.stem_kernel_size % 2 == 0:
            raise ConfigError(
                f"Kernel sizes must be odd, got kernel_size={self.kernel_size}, "
                f"stem_kernel_size={self.stem_kernel_size}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.head not in HEADS:
            raise ConfigError(f"model.head must be one of {HEADS}, got {self.head!r}")
        if self.alphabet_size != ALPHABET_SIZE:
            raise ConfigError(f"model.alphabet_size is fixed at {ALPHABET_SIZE}, got {self.alphabet_size}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**values)

    def with_head(self, head: str, n_classes: int) -> "ModelConfig":
        return replace(self, head=head, n_classes=n_classes)

    @property
    def has_b_branch(self) -> bool:
        return self.variant != "single_gate"


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class AffineParams:
    w: Tensor
    b: Tensor


@dataclass
class GcbParams:
    """One block: LayerNorm + convolution per branch, weights not shared."""

    ln_a: NormParams
    conv_a: ConvParams
    ln_b: Optional[NormParams] = None
    conv_b: Optional[ConvParams] = None
    dilation: int = 1


@dataclass
class UNetParams:
    """Stride-2 encoder and upsampling decoder around the bottleneck blocks."""

    down_a: List[ConvParams]
    down_b: List[ConvParams]
    up_a: List[ConvParams]
    up_b: List[ConvParams]
    bottleneck: List[GcbParams] = field(default_factory=list)


@dataclass
class ModelParams:
    """Learned parameters; ``gcbs`` are the bottleneck blocks for the U-Net variant."""

    stem: ConvParams
    gcbs: List[GcbParams]
    mlp: List[AffineParams]
    head: AffineParams
    unet: Optional[UNetParams] = None
    names: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict, repr=False)

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        return self.names

    def backbone_names(self) -> List[str]:
        return [name for name in self.names if not name.startswith("head.")]

    @classmethod
    def from_named(cls, config: ModelConfig, named: Dict[str, Tensor]) -> "ModelParams":
        """
        Assemble structured parameters from a name -> tensor mapping.

        Args:
            config: Architecture the tensors belong to
            named: Mapping containing exactly the names of ``param_shapes(config)``

        Returns:
            ModelParams sharing the given tensors
        """
        shapes = param_shapes(config)
        missing = [n for n in shapes if n not in named]
        extra = [n for n in named if n not in shapes]
        if missing or extra:
            raise ShapeError(f"Parameter names do not match the config (missing={missing}, unexpected={extra})")
        for name, shape in shapes.items():
            if tuple(named[name].shape) != shape:
                raise ShapeError(f"Parameter {name} has shape {named[name].shape}, config expects {shape}")

        def conv(prefix: str) -> ConvParams:
            return ConvParams(named[f"{prefix}.w"], named[f"{prefix}.b"])

        def norm(prefix: str) -> NormParams:
            return NormParams(named[f"{prefix}.gamma"], named[f"{prefix}.beta"])

        gcbs = []
        for index, dilation in enumerate(block_dilations(config)):
            prefix = f"gcb{index}"
            gcbs.append(GcbParams(
                ln_a=norm(f"{prefix}.ln_a"),
                conv_a=conv(f"{prefix}.conv_a"),
                ln_b=norm(f"{prefix}.ln_b") if config.has_b_branch else None,
                conv_b=conv(f"{prefix}.conv_b") if config.has_b_branch else None,
                dilation=dilation,
            ))
        unet = None
        if config.variant == "unet_downsample":
            levels = range(config.unet_depth)
            unet = UNetParams(
                down_a=[conv(f"unet.down{i}.a") for i in levels],
                down_b=[conv(f"unet.down{i}.b") for i in levels],
                up_a=[conv(f"unet.up{i}.a") for i in levels],
                up_b=[conv(f"unet.up{i}.b") for i in levels],
                bottleneck=gcbs,
            )
        ordered = OrderedDict((name, named[name]) for name in shapes)
        return cls(
            stem=conv("stem"),
            gcbs=gcbs,
            mlp=[AffineParams(named["mlp0.w"], named["mlp0.b"]), AffineParams(named["mlp1.w"], named["mlp1.b"])],
            head=AffineParams(named["head.w"], named["head.b"]),
            unet=unet,
            names=ordered,
        )


@dataclass
class BranchState:
    """Paired (A, B) features flowing through the block stack."""

    a: Tensor
    b: Tensor

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ShapeError(f"Branch shapes differ: A {self.a.shape} vs B {self.b.shape}")


def dilation_schedule(dilation_base: int, n_gcb: int, stage_size: int = 5) -> List[int]:
    """
    Per-block dilations: each stage runs [1, 1, d, d^2, d^3, ...] and restarts.

    Args:
        dilation_base: Base d
        n_gcb: Number of blocks
        stage_size: Blocks per stage

    Returns:
        List of n_gcb dilation rates
    """
    stage = [1] + [dilation_base ** power for power in range(stage_size - 1)]
    return [stage[index % stage_size] for index in range(n_gcb)]


def block_dilations(config: ModelConfig) -> List[int]:
    """Dilations actually used by the config's blocks (all 1 in the U-Net bottleneck)."""
    if config.variant == "unet_downsample":
        return [1] * config.n_gcb
    return dilation_schedule(config.dilation_base, config.n_gcb, config.stage_size)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name -> shape for every learnable tensor, in initialization order."""
    d, k = config.hidden_dim, config.kernel_size
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["stem.w"] = (config.stem_kernel_size, config.alphabet_size, d)
    shapes["stem.b"] = (d,)
    if config.variant == "unet_downsample":
        for level in range(config.unet_depth):
            for stage in ("down", "up"):
                for branch in ("a", "b"):
                    shapes[f"unet.{stage}{level}.{branch}.w"] = (k, d, d)
                    shapes[f"unet.{stage}{level}.{branch}.b"] = (d,)
    branches = ("a", "b") if config.has_b_branch else ("a",)
    for index in range(config.n_gcb):
        for branch in branches:
            shapes[f"gcb{index}.ln_{branch}.gamma"] = (d,)
            shapes[f"gcb{index}.ln_{branch}.beta"] = (d,)
            shapes[f"gcb{index}.conv_{branch}.w"] = (k, d, d)
            shapes[f"gcb{index}.conv_{branch}.b"] = (d,)
    for layer in range(2):
        shapes[f"mlp{layer}.w"] = (d, d)
        shapes[f"mlp{layer}.b"] = (d,)
    shapes["head.w"] = (d, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of learnable scalars."""
    return int(sum(math.prod(shape) for shape in param_shapes(config).values()))


def init_params(config: ModelConfig, seed: int, std: float = INIT_STD,
                dtype: Optional[type] = None) -> ModelParams:
    """
    Draw a fresh parameter set.

    Weights ~ Normal(0, std^2) truncated at +/- 2 std, biases and LayerNorm
    betas 0, gammas 1. Draws happen in ``param_shapes`` order from one seeded
    generator, so equal seeds give bit-identical parameters.

    Args:
        config: Architecture
        seed: Generator seed
        std: Weight standard deviation before truncation
        dtype: Parameter dtype (defaults to the current precision)

    Returns:
        ModelParams
    """
    rng = Rng(seed)
    named: Dict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            named[name] = Tensor._wrap(rng.truncated_normal(shape, std, dtype=dtype))
        elif name.endswith(".gamma"):
            named[name] = Tensor.ones(shape, dtype=dtype)
        else:
            named[name] = Tensor.zeros(shape, dtype=dtype)
    return ModelParams.from_named(config, named)


def width_for_param_budget(config: ModelConfig, target: int) -> int:
    """
    Hidden width whose parameter count is closest to a target.

    Args:
        config: Architecture whose width is adjusted
        target: Parameter budget

    Returns:
        Best hidden_dim (ties resolve to the smaller width)
    """
    def count(width: int) -> int:
        return param_count(replace(config, hidden_dim=width))

    high = 1
    while count(high) < target:
        high *= 2
    low = max(1, high // 2)
    while low < high:
        mid = (low + high) // 2
        if count(mid) < target:
            low = mid + 1
        else:
            high = mid
    candidates = [w for w in (low - 1, low) if w >= 1]
    return min(candidates, key=lambda w: (abs(count(w) - target), w))


def parity_width(config: ModelConfig, reference: ModelConfig) -> int:
    """Width at which ``config`` has about as many parameters as ``reference``."""
    return width_for_param_budget(config, param_count(reference))


def parity_config(config: ModelConfig, reference: ModelConfig) -> ModelConfig:
    return replace(config, hidden_dim=parity_width(config, reference))


# ----------------------------------------------------------------------------
# Blocks
# ----------------------------------------------------------------------------


def gcb_forward(state: BranchState, params: GcbParams, dilation: int) -> BranchState:
    """
    Gated Convolution Block.

    h = GELU(conv_A(LN_A(A))), g = sigmoid(conv_B(LN_B(B))),
    A' = A + h * g, B' = B + g.
    """
    h = gelu(conv1d(layer_norm(state.a, params.ln_a.gamma, params.ln_a.beta),
                    params.conv_a.w, params.conv_a.b, dilation))
    g = sigmoid(conv1d(layer_norm(state.b, params.ln_b.gamma, params.ln_b.beta),
                       params.conv_b.w, params.conv_b.b, dilation))
    return BranchState(add(state.a, hadamard(h, g)), add(state.b, g))


def gcb_forward_single(x: Tensor, params: GcbParams, dilation: int = 1) -> Tensor:
    """Single gate ablation: one convolution z feeds both GELU(z) and sigmoid(z)."""
    z = conv1d(layer_norm(x, params.ln_a.gamma, params.ln_a.beta), params.conv_a.w, params.conv_a.b, dilation)
    return add(x, hadamard(gelu(z), sigmoid(z)))


def gcb_forward_additive(state: BranchState, params: GcbParams, dilation: int = 1) -> BranchState:
    """Addition without gate: A' = A + h + g, B' = B + g with both paths GELU."""
    h = gelu(conv1d(layer_norm(state.a, params.ln_a.gamma, params.ln_a.beta),
                    params.conv_a.w, params.conv_a.b, dilation))
    g = gelu(conv1d(layer_norm(state.b, params.ln_b.gamma, params.ln_b.beta),
                    params.conv_b.w, params.conv_b.b, dilation))
    return BranchState(add(add(state.a, h), g), add(state.b, g))


def unet_block_forward(state: BranchState, params: UNetParams) -> BranchState:
    """
    U-Net style block: downsample, gate at the bottleneck, upsample back.

    Each encoder level halves the length with a stride-2 convolution. The
    bottleneck GCBs (dilation 1) change the coarse features; that change is
    carried up through nearest-neighbour upsampling and a convolution per
    level and added onto the skip path, so the block maps [l, d] -> [l, d].
    """
    depth = len(params.down_a)
    length = state.a.shape[-2]
    if length % (2 ** depth):
        raise PreconditionError(f"U-Net depth {depth} needs a length divisible by {2 ** depth}, got {length}")

    a, b = state.a, state.b
    for level in range(depth):
        a = conv1d_strided(a, params.down_a[level].w, params.down_a[level].b, stride=2)
        b = conv1d_strided(b, params.down_b[level].w, params.down_b[level].b, stride=2)

    bottom = BranchState(a, b)
    for block in params.bottleneck:
        bottom = gcb_forward(bottom, block, block.dilation)

    delta_a, delta_b = subtract(bottom.a, a), subtract(bottom.b, b)
    for level in reversed(range(depth)):
        delta_a = conv1d(upsample_nearest(delta_a), params.up_a[level].w, params.up_a[level].b)
        delta_b = conv1d(upsample_nearest(delta_b), params.up_b[level].w, params.up_b[level].b)
    return BranchState(add(state.a, delta_a), add(state.b, delta_b))


def check_one_hot(x: Tensor, alphabet_size: int = ALPHABET_SIZE) -> None:
    """Reject inputs whose rows are not unit basis vectors over the alphabet."""
    if x.ndim not in (2, 3) or x.shape[-1] != alphabet_size:
        raise ShapeError(f"Expected one-hot input [.., l, {alphabet_size}], got {x.shape}")
    data = x.data
    if not (np.all((data == 0) | (data == 1)) and np.all(data.sum(axis=-1) == 1)):
        raise DataFormatError("Input is not a valid one-hot encoding over {A, C, G, T, N}")


def model_forward(x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """
    Backbone forward pass.

    stem conv -> A0 = B0 = stem output -> blocks with scheduled dilations ->
    two-layer GELU MLP on the A branch.

    Args:
        x: One-hot input [l, 5] or [batch, l, 5]
        params: Model parameters
        config: Architecture

    Returns:
        Per-position features [l, d] (or [batch, l, d])
    """
    check_one_hot(x, config.alphabet_size)
    stem = conv1d(x, params.stem.w, params.stem.b, 1)
    state = BranchState(stem, stem)

    if config.variant == "unet_downsample":
        state = unet_block_forward(state, params.unet)
    elif config.variant == "single_gate":
        a = state.a
        for block in params.gcbs:
            a = gcb_forward_single(a, block, block.dilation)
        state = BranchState(a, state.b)
    elif config.variant == "additive":
        for block in params.gcbs:
            state = gcb_forward_additive(state, block, block.dilation)
    else:
        for block in params.gcbs:
            state = gcb_forward(state, block, block.dilation)

    hidden = gelu(affine(state.a, params.mlp[0].w, params.mlp[0].b))
    return affine(hidden, params.mlp[1].w, params.mlp[1].b)


# ----------------------------------------------------------------------------
# Heads
# ----------------------------------------------------------------------------


def mlm_logits(features: Tensor, head: AffineParams) -> Tensor:
    """Per-position scores over the four bases A, C, G, T."""
    if head.w.shape[-1] != MLM_CLASSES:
        raise ShapeError(f"mlm head must output {MLM_CLASSES} classes, got {head.w.shape[-1]}")
    return affine(features, head.w, head.b)


def class_logits(features: Tensor, head: AffineParams) -> Tensor:
    """Sequence-level scores: mean pool over positions, then a linear map."""
    return affine(mean_pool(features), head.w, head.b)


def token_logits(features: Tensor, head: AffineParams) -> Tensor:
    """Per-position scores over n labels."""
    return affine(features, head.w, head.b)


def head_logits(features: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    if config.head == "mlm":
        return mlm_logits(features, params.head)
    if config.head == "sequence_class":
        return class_logits(features, params.head)
    return token_logits(features, params.head)


class ConvNova:
    """A model config together with its parameters."""

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None, seed: int = 0):
        """
        Initialize the model.

        Args:
            config: Architecture
            params: Existing parameters; freshly initialized from ``seed`` when None
            seed: Initialization seed
        """
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, x: Tensor) -> Tensor:
        return model_forward(x, self.params, self.config)

    def logits(self, x: Tensor) -> Tensor:
        return head_logits(self.forward(x), self.params, self.config)

    def param_count(self) -> int:
        return param_count(self.config)

    def with_head(self, head: str, n_classes: int, seed: int = 0) -> "ConvNova":
        """
        Copy of the model with a new task head (backbone tensors copied, head re-initialized).

        Args:
            head: 'mlm', 'sequence_class' or 'token_class'
            n_classes: Head width
            seed: Seed for the new head

        Returns:
            New ConvNova
        """
        config = self.config.with_head(head, n_classes)
        fresh = init_params(config, seed, dtype=self.params.stem.w.dtype.type)
        named = OrderedDict(fresh.named_tensors())
        for name in self.params.backbone_names():
            named[name] = self.params.names[name].detach()
        logger.info("Warm start: copied %d backbone tensors, new %s head with %d classes",
                    len(self.params.backbone_names()), head, n_classes)
        return ConvNova(config, ModelParams.from_named(config, named))

    def get_model_info(self) -> Dict[str, Any]:
        """
        Summary of the architecture.

        Returns:
            Dictionary with config values, parameter count and dilations
        """
        from src.receptive_field import receptive_field_analytic

        info = self.config.to_dict()
        info["param_count"] = self.param_count()
        info["dilations"] = block_dilations(self.config)
        if self.config.variant != "unet_downsample":
            info["receptive_field"] = receptive_field_analytic(self.config)
        return info
