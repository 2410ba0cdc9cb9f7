"""
Receptive Field Analysis

Analytic receptive field of a ConvNova stack, an empirical check by input
perturbation, and a planner choosing the dilation base that keeps the field
within a fraction of the input length.
"""

import logging
from dataclasses import replace
from typing import NamedTuple, Optional

import numpy as np

from src.convnova_model import ModelConfig, ModelParams, block_dilations, init_params, model_forward
from src.errors import PreconditionError
from src.genome_data import one_hot_codes
from src.tensor_engine import Rng, Tensor, precision

logger = logging.getLogger(__name__)

PROBE_STD = 0.5
CHANGE_THRESHOLD = 1e-9


class DilationPlan(NamedTuple):
    """Result of ``plan_dilation_for_fraction``."""

    base: int
    receptive_field: int
    target: float
    infeasible: bool


def receptive_field_analytic(config: ModelConfig) -> int:
    """
    Input positions that can influence one output position.

    RF = 1 + (k_stem - 1) + (k - 1) * sum of block dilations. The MLP and the
    per-position heads add nothing.

    Args:
        config: Architecture (not the U-Net variant)

    Returns:
        Receptive field in positions
    """
    if config.variant == "unet_downsample":
        raise PreconditionError("Analytic receptive field is not supported for the unet_downsample variant")
    dilations = block_dilations(config)
    return 1 + (config.stem_kernel_size - 1) + (config.kernel_size - 1) * sum(dilations)


def receptive_field_empirical(params: Optional[ModelParams], config: ModelConfig, length: int,
                              seed: int = 0) -> int:
    """
    Measure the receptive field by perturbing the centre input position.

    Runs in 64-bit. The centre base is swapped for another base and every output
    position whose features move by more than 1e-9 is counted.

    Args:
        params: Nonzero parameters; a random init with std 0.5 is drawn when None
        config: Architecture (not the U-Net variant, hidden_dim >= 2)
        length: Probe length, larger than the analytic receptive field
        seed: Seed for the probe sequence and the random init

    Returns:
        Number of output positions affected by the perturbation
    """
    analytic = receptive_field_analytic(config)
    if length <= analytic:
        raise PreconditionError(f"Probe length {length} must exceed the analytic receptive field {analytic}")
    if config.hidden_dim < 2:
        raise PreconditionError("Empirical receptive field needs hidden_dim >= 2")

    with precision("float64"):
        if params is None:
            params = init_params(config, seed, std=PROBE_STD, dtype=np.float64)
        if not any(np.any(t.data != 0) for name, t in params.named_tensors().items() if name.endswith(".w")):
            raise PreconditionError("Empirical receptive field needs nonzero weights")
        named = {name: Tensor(t.data, dtype=np.float64) for name, t in params.named_tensors().items()}
        probe_params = ModelParams.from_named(config, named)

        codes = Rng(seed, stream=1).integers(0, 4, size=length)
        centre = length // 2
        perturbed = codes.copy()
        perturbed[centre] = (codes[centre] + 1) % 4

        base_out = model_forward(Tensor(one_hot_codes(codes)), probe_params, config).data
        moved_out = model_forward(Tensor(one_hot_codes(perturbed)), probe_params, config).data

    changed = np.any(np.abs(moved_out - base_out) > CHANGE_THRESHOLD, axis=-1)
    count = int(changed.sum())
    logger.debug("Empirical receptive field %d (analytic %d) at length %d", count, analytic, length)
    return count


def plan_dilation_for_fraction(length: int, fraction: float, kernel_size: int, n_gcb: int,
                               stage_size: int = 5, stem_kernel_size: Optional[int] = None) -> DilationPlan:
    """
    Largest dilation base whose receptive field stays within fraction * length.

    Args:
        length: Input length
        fraction: Share of the input the field may cover, 0 < fraction <= 1
        kernel_size: Block kernel size
        n_gcb: Number of blocks
        stage_size: Blocks per dilation stage
        stem_kernel_size: Stem kernel size (defaults to kernel_size)

    Returns:
        DilationPlan; base 1 with ``infeasible`` set when even base 1 is too wide
    """
    if not 0 < fraction <= 1:
        raise PreconditionError(f"fraction must lie in (0, 1], got {fraction}")
    if length < 1:
        raise PreconditionError(f"length must be >= 1, got {length}")
    target = fraction * length
    config = ModelConfig(hidden_dim=1, n_gcb=n_gcb, stage_size=stage_size, dilation_base=1,
                         kernel_size=kernel_size, stem_kernel_size=stem_kernel_size)

    base, field = 1, receptive_field_analytic(config)
    if field > target:
        logger.warning("Receptive field %d at dilation base 1 already exceeds %.1f positions", field, target)
        return DilationPlan(1, field, target, True)

    while True:
        wider = receptive_field_analytic(replace(config, dilation_base=base + 1))
        # Fewer than three blocks per stage never use the base.
        if wider > target or wider == field:
            break
        base, field = base + 1, wider
    return DilationPlan(base, field, target, False)
